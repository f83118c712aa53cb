#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "tucan/colorspace.hpp"
#include "tucan/error.hpp"

namespace tucan {

struct DecodedImage {
  RgbImage rgb;
  bool grayscale = false;  // single-channel source, replicated to RGB
};

/// Decodes PNG/JPEG (anything OpenCV reads) to 8-bit RGB; nullopt when unreadable.
inline std::optional<DecodedImage> try_read_image(const std::filesystem::path& path) {
  cv::Mat m;
  try {
    m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception&) {
    return std::nullopt;
  }
  if (m.empty() || m.dims != 2) return std::nullopt;
  if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
  if (m.depth() != CV_8U) return std::nullopt;
  DecodedImage out{RgbImage(m.rows, m.cols, 3), m.channels() == 1 || m.channels() == 2};
  for (int y = 0; y < m.rows; ++y) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      const std::uint8_t* px = row + static_cast<std::size_t>(x) * m.channels();
      for (int c = 0; c < 3; ++c)
        out.rgb.at(y, x, c) = out.grayscale ? px[0] : px[2 - c];  // OpenCV stores BGR(A)
    }
  }
  return out;
}

inline DecodedImage read_image(const std::filesystem::path& path) {
  auto img = try_read_image(path);
  if (!img) throw ArtifactError("cannot decode image " + path.string());
  return std::move(*img);
}

/// Writes RGB or single-channel images; format from the extension.
inline void write_image(const std::filesystem::path& path, const RgbImage& img) {
  if (img.channels != 3 && img.channels != 1) throw ShapeError("write_image: expected 1 or 3 channels");
  cv::Mat m(img.height, img.width, img.channels == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < img.height; ++y) {
    std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[x * img.channels + c] = img.at(y, x, img.channels == 3 ? 2 - c : 0);
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception&) {
  }
  if (!ok) throw ArtifactError("cannot write image " + path.string());
}

}  // namespace tucan
