#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tucan/colorspace.hpp"
#include "tucan/image_io.hpp"
#include "tucan/log.hpp"

namespace tucan::fixtures {

namespace fs = std::filesystem;

inline fs::path source_dir() { return TUCAN_SOURCE_DIR; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("tucan_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

/// Outdoor-like scene: bright blue sky over darker green ground, an orange
/// sun and a few reddish or gray blobs. Colour is predictable from lightness
/// and position, which is what the smoke runs need.
inline RgbImage scene(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  RgbImage img(size, size, 3);
  const double horizon = 0.35 + 0.3 * U(rng);
  const double sky_b = 200 + 55 * U(rng), grass_g = 110 + 80 * U(rng);
  const double sx = U(rng), sy = horizon * U(rng), sr = 0.05 + 0.08 * U(rng);
  struct Blob {
    double x, y, r;
    double c[3];
  };
  std::vector<Blob> blobs;
  const int nb = 1 + static_cast<int>(U(rng) * 3);
  for (int i = 0; i < nb; ++i) {
    Blob b{U(rng), horizon + (1 - horizon) * U(rng), 0.05 + 0.1 * U(rng), {}};
    if (U(rng) < 0.5) {
      b.c[0] = 150 + 80 * U(rng);
      b.c[1] = 30 + 40 * U(rng);
      b.c[2] = 30 + 30 * U(rng);
    } else {
      const double g = 60 + 100 * U(rng);
      b.c[0] = b.c[1] = b.c[2] = g;
    }
    blobs.push_back(b);
  }
  std::normal_distribution<double> noise(0.0, 4.0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double fy = (y + 0.5) / size, fx = (x + 0.5) / size;
      double c[3];
      if (fy < horizon) {
        const double t = fy / horizon;
        c[0] = 90 + 90 * t;
        c[1] = 140 + 70 * t;
        c[2] = sky_b;
      } else {
        const double t = (fy - horizon) / (1 - horizon);
        c[0] = 40 + 30 * t;
        c[1] = grass_g - 40 * t;
        c[2] = 30 + 10 * t;
      }
      if ((fx - sx) * (fx - sx) + (fy - sy) * (fy - sy) < sr * sr) {
        c[0] = 255;
        c[1] = 200;
        c[2] = 60;
      }
      for (const auto& b : blobs)
        if ((fx - b.x) * (fx - b.x) + (fy - b.y) * (fy - b.y) < b.r * b.r)
          for (int k = 0; k < 3; ++k) c[k] = b.c[k];
      for (int k = 0; k < 3; ++k)
        img.at(y, x, k) = static_cast<std::uint8_t>(std::clamp(std::lround(c[k] + noise(rng)), 0L, 255L));
    }
  return img;
}

/// Writes `count` scene PNGs named img_000.png ... into `dir`.
inline std::vector<fs::path> write_fixture_set(const fs::path& dir, int count, int size, std::uint64_t seed) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::vector<fs::path> out;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03d.png", i);
    out.push_back(dir / name);
    write_image(out.back(), scene(size, rng));
  }
  return out;
}

/// Silences the log for the lifetime of the object, counting warnings.
class LogCapture {
 public:
  LogCapture() {
    old_ = set_log_sink([this](LogLevel l, const std::string& m) {
      if (l == LogLevel::warning) warnings.push_back(m);
    });
  }
  ~LogCapture() { set_log_sink(std::move(old_)); }
  std::vector<std::string> warnings;

 private:
  LogSink old_;
};

}  // namespace tucan::fixtures
