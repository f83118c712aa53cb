#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "tucan/colorspace.hpp"
#include "tucan/error.hpp"
#include "tucan/image_io.hpp"
#include "tucan/log.hpp"
#include "tucan/resample.hpp"

namespace tucan {

namespace fs = std::filesystem;

/// Bilinear resize of an 8-bit RGB image; identity when the size already matches.
inline RgbImage resize_rgb(const RgbImage& img, int h, int w) {
  if (img.height == h && img.width == w) return img;
  RgbImage out(h, w, img.channels);
  std::vector<double> in(img.pixels()), res(static_cast<std::size_t>(h) * w);
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t p = 0; p < img.pixels(); ++p) in[p] = img.data[p * img.channels + c];
    bilinear_resize(in, img.height, img.width, res, h, w);
    for (std::size_t p = 0; p < res.size(); ++p)
      out.data[p * img.channels + c] = static_cast<std::uint8_t>(std::clamp(std::lround(res[p]), 0L, 255L));
  }
  return out;
}

/// One training/evaluation image at the network input size.
struct SampleRecord {
  std::string path;
  int size = 0;
  std::vector<double> lightness;  // L* in [0,100]
  std::vector<double> L;          // (L* - 50) / 50, the network input
  AbImage ab;                     // ground-truth chroma at size x size
  bool grayscale_source = false;

  struct Level {
    AbImage ab;
    SoftEncoding z;
  };
  std::map<int, Level> levels;  // cached targets keyed by resolution

  /// ab area-resized to res x res and its soft encoding, computed once.
  const Level& level(int res, const BinTable& bins, SoftEncodingParams params = {}) {
    auto it = levels.find(res);
    if (it == levels.end()) {
      Level lv;
      lv.ab = res == size ? ab : resize(ab, res, res, true);
      lv.z = soft_encode_sparse(lv.ab, bins, params);
      it = levels.emplace(res, std::move(lv)).first;
    }
    return it->second;
  }

  LabImage lab() const {
    LabImage out(size, size);
    out.L = lightness;
    out.a = ab.a;
    out.b = ab.b;
    return out;
  }
};

/// Resize to size x size, convert to Lab and pre-compute targets at `resolutions`.
inline SampleRecord prepare_sample(const DecodedImage& image, int size, const BinTable& bins,
                                   const std::vector<int>& resolutions = {}, std::string path = {}) {
  const LabImage lab = rgb_to_lab(resize_rgb(image.rgb, size, size));
  SampleRecord r;
  r.path = std::move(path);
  r.size = size;
  r.lightness = lab.L;
  r.L.resize(lab.L.size());
  for (std::size_t i = 0; i < lab.L.size(); ++i) r.L[i] = (lab.L[i] - 50.0) / 50.0;
  r.ab = lab.chroma();
  r.grayscale_source = image.grayscale;
  for (int res : resolutions) r.level(res, bins);
  return r;
}

inline bool is_image_path(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm" || ext == ".pgm";
}

/// Image files under `root` (recursive) or listed in `manifest` (one relative
/// path per line), in lexicographic order. Files that fail to decode are
/// skipped with a warning.
inline std::vector<fs::path> scan_dataset(const fs::path& root, const fs::path& manifest = {}) {
  if (!fs::is_directory(root)) throw ArtifactError("dataset root is not a directory: " + root.string());
  std::vector<fs::path> candidates;
  if (!manifest.empty()) {
    std::ifstream in(manifest);
    if (!in) throw ArtifactError("cannot read split manifest " + manifest.string());
    for (std::string line; std::getline(in, line);) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty() && line[0] != '#') candidates.push_back(root / line);
    }
  } else {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && is_image_path(e.path())) candidates.push_back(e.path());
  }
  std::sort(candidates.begin(), candidates.end());
  std::vector<fs::path> out;
  for (const auto& p : candidates) {
    if (try_read_image(p))
      out.push_back(p);
    else
      log_warning("skipping unreadable image " + p.string());
  }
  if (out.empty()) throw ArtifactError("no readable images under " + root.string());
  log_info("dataset " + root.string() + ": " + std::to_string(out.size()) + " images");
  return out;
}

inline std::vector<SampleRecord> load_dataset(const std::vector<fs::path>& files, int size, const BinTable& bins,
                                              const std::vector<int>& resolutions = {}) {
  std::vector<SampleRecord> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(prepare_sample(read_image(f), size, bins, resolutions, f.string()));
  return out;
}

/// Index batches for one epoch: a permutation seeded by (seed, epoch), cut
/// into batch_size chunks with the last partial batch kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                     std::uint64_t epoch) {
  if (batch_size < 1) throw InputError("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  return out;
}

}  // namespace tucan
