#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tucan/colorspace.hpp"
#include "tucan/datapipe.hpp"
#include "tucan/error.hpp"
#include "tucan/image_io.hpp"
#include "tucan/net.hpp"

namespace tucan {

inline constexpr double kPsnrCap = 100.0;

inline void check_same_shape(const RgbImage& a, const RgbImage& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw ShapeError(std::string(what) + ": image shapes differ");
}

/// 10 log10(255^2 / MSE) over all channels, capped at 100 dB.
inline double psnr(const RgbImage& pred, const RgbImage& ref) {
  check_same_shape(pred, ref, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - ref.data[i];
    se += d * d;
  }
  if (se == 0.0) return kPsnrCap;
  const double mse = se / static_cast<double>(pred.data.size());
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

/// ITU-R 601 luma in [0,255].
inline std::vector<double> luma(const RgbImage& img) {
  if (img.channels == 1) return {img.data.begin(), img.data.end()};
  if (img.channels != 3) throw ShapeError("luma: expected 1 or 3 channels");
  std::vector<double> y(img.pixels());
  for (std::size_t p = 0; p < y.size(); ++p)
    y[p] = 0.299 * img.data[3 * p] + 0.587 * img.data[3 * p + 1] + 0.114 * img.data[3 * p + 2];
  return y;
}

enum class SsimBoundary {
  valid,  // mean over windows lying fully inside the image
  wrap    // toroidal padding, every pixel contributes
};

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double range = 255.0;
  SsimBoundary boundary = SsimBoundary::valid;
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0.0;
  for (int i = 0; i < size; ++i) s += k[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

// Separable filter; output is (h-K+1)x(w-K+1) for valid, hxw for wrap.
inline std::vector<double> filter2(const std::vector<double>& x, int h, int w, const std::vector<double>& k,
                                   SsimBoundary mode, int& oh, int& ow) {
  const int K = static_cast<int>(k.size()), r = K / 2;
  const bool wrap = mode == SsimBoundary::wrap;
  oh = wrap ? h : h - K + 1;
  ow = wrap ? w : w - K + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < h; ++y)
    for (int x0 = 0; x0 < ow; ++x0) {
      double s = 0.0;
      for (int i = 0; i < K; ++i) {
        const int xx = wrap ? ((x0 + i - r) % w + w) % w : x0 + i;
        s += k[i] * x[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * ow + x0] = s;
    }
  for (int y0 = 0; y0 < oh; ++y0)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < K; ++i) {
        const int yy = wrap ? ((y0 + i - r) % h + h) % h : y0 + i;
        s += k[i] * tmp[static_cast<std::size_t>(yy) * ow + x];
      }
      out[static_cast<std::size_t>(y0) * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean local SSIM of two single-channel rasters.
inline double ssim_plane(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                         const SsimParams& prm = {}) {
  if (x.size() != y.size() || x.size() != static_cast<std::size_t>(h) * w) throw ShapeError("ssim: raster sizes differ");
  if (h < prm.window || w < prm.window)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the " +
                     std::to_string(prm.window) + "x" + std::to_string(prm.window) + " window");
  const auto k = detail::gaussian_kernel(prm.window, prm.sigma);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  int oh = 0, ow = 0;
  const auto ux = detail::filter2(x, h, w, k, prm.boundary, oh, ow);
  const auto uy = detail::filter2(y, h, w, k, prm.boundary, oh, ow);
  const auto uxx = detail::filter2(xx, h, w, k, prm.boundary, oh, ow);
  const auto uyy = detail::filter2(yy, h, w, k, prm.boundary, oh, ow);
  const auto uxy = detail::filter2(xy, h, w, k, prm.boundary, oh, ow);
  const double c1 = (prm.k1 * prm.range) * (prm.k1 * prm.range), c2 = (prm.k2 * prm.range) * (prm.k2 * prm.range);
  double s = 0.0;
  for (std::size_t i = 0; i < ux.size(); ++i) {
    const double vx = uxx[i] - ux[i] * ux[i], vy = uyy[i] - uy[i] * uy[i], cxy = uxy[i] - ux[i] * uy[i];
    s += ((2 * ux[i] * uy[i] + c1) * (2 * cxy + c2)) / ((ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2));
  }
  return s / static_cast<double>(ux.size());
}

/// SSIM on luma. Identical inputs score exactly 1.
inline double ssim(const RgbImage& pred, const RgbImage& ref, const SsimParams& prm = {}) {
  check_same_shape(pred, ref, "ssim");
  if (pred.data == ref.data) {
    if (pred.height < prm.window || pred.width < prm.window) throw ShapeError("ssim: image smaller than window");
    return 1.0;
  }
  return ssim_plane(luma(pred), luma(ref), pred.height, pred.width, prm);
}

// -- LPIPS plug-in ------------------------------------------------------------

/// Any perceptual scorer of two RGB images.
class LpipsPlugin {
 public:
  virtual ~LpipsPlugin() = default;
  virtual double score(const RgbImage& pred, const RgbImage& ref) = 0;
  virtual std::string identity() const = 0;
};

/// Runs `command <pred.png> <ref.png>` and reads one number from its stdout.
class CommandLpips final : public LpipsPlugin {
 public:
  explicit CommandLpips(std::string command) : cmd_(std::move(command)) {
    if (cmd_.empty()) throw InputError("lpips plug-in command is empty");
  }

  double score(const RgbImage& pred, const RgbImage& ref) override {
    namespace fs = std::filesystem;
    std::random_device rd;
    const fs::path dir = fs::temp_directory_path() / ("tucan_lpips_" + std::to_string(rd()));
    fs::create_directories(dir);
    const fs::path a = dir / "pred.png", b = dir / "ref.png";
    write_image(a, pred);
    write_image(b, ref);
    const std::string line = cmd_ + " '" + a.string() + "' '" + b.string() + "'";
    std::string out;
    int status = -1;
    if (FILE* pipe = ::popen(line.c_str(), "r")) {
      char buf[256];
      while (std::fgets(buf, sizeof buf, pipe)) out += buf;
      status = ::pclose(pipe);
    }
    std::error_code ec;
    fs::remove_all(dir, ec);
    if (status != 0) throw ArtifactError("lpips plug-in failed (" + cmd_ + ")");
    std::istringstream is(out);
    double v = 0.0;
    if (!(is >> v) || !std::isfinite(v)) throw ArtifactError("lpips plug-in returned no number: '" + out + "'");
    return v;
  }
  std::string identity() const override { return "command:" + cmd_; }

 private:
  std::string cmd_;
};

// -- dataset evaluation -------------------------------------------------------

struct MetricRow {
  std::string path;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> lpips;
};

struct MetricReport {
  std::string model;
  std::string dataset;
  std::optional<std::string> lpips_plugin;
  std::vector<MetricRow> rows;
  double mean_psnr = 0.0, mean_ssim = 0.0;
  std::optional<double> mean_lpips;

  void recompute_means() {
    double p = 0.0, s = 0.0, l = 0.0;
    for (const auto& r : rows) {
      p += r.psnr;
      s += r.ssim;
      if (r.lpips) l += *r.lpips;
    }
    const double n = static_cast<double>(rows.size());
    mean_psnr = rows.empty() ? 0.0 : p / n;
    mean_ssim = rows.empty() ? 0.0 : s / n;
    mean_lpips = lpips_plugin && !rows.empty() ? std::optional<double>(l / n) : std::nullopt;
  }
};

/// Predicts ab (record size) from a record's lightness.
using Colorizer = std::function<AbImage(const SampleRecord&)>;

inline Colorizer perfect_colorizer() {
  return [](const SampleRecord& r) { return r.ab; };
}
inline Colorizer gray_colorizer() {
  return [](const SampleRecord& r) { return AbImage(r.size, r.size); };
}

/// Runs the network in eval mode on each record.
inline Colorizer network_colorizer(TucanNet& net) {
  return [&net](const SampleRecord& r) {
    if (net.temp_level()) throw StateError("evaluation needs the final heads; detach the temporary head first");
    Tensor L(1, 1, r.size, r.size);
    std::copy(r.L.begin(), r.L.end(), L.data());
    const auto out = net.forward(L, Mode::eval);
    AbImage ab(r.size, r.size);
    const std::size_t plane = out.ab_hat.plane();
    std::copy_n(out.ab_hat.data(), plane, ab.a.begin());
    std::copy_n(out.ab_hat.data() + plane, plane, ab.b.begin());
    return ab;
  };
}

/// Reference and prediction are both rendered from the record's true L.
inline MetricReport evaluate(const std::vector<SampleRecord>& data, const Colorizer& colorize,
                             LpipsPlugin* plugin = nullptr, std::string model_id = "model",
                             std::string dataset_id = "dataset") {
  MetricReport rep;
  rep.model = std::move(model_id);
  rep.dataset = std::move(dataset_id);
  if (plugin)
    rep.lpips_plugin = plugin->identity();
  else
    log_info("lpips: no plug-in supplied, metric omitted");
  for (const auto& r : data) {
    const RgbImage ref = lab_to_rgb(r.lab());
    LabImage pl = r.lab();
    const AbImage ab = colorize(r);
    if (ab.height != r.size || ab.width != r.size) throw ShapeError("colorizer returned wrong size for " + r.path);
    pl.a = ab.a;
    pl.b = ab.b;
    const RgbImage pred = lab_to_rgb(pl);
    MetricRow row{r.path, psnr(pred, ref), ssim(pred, ref), std::nullopt};
    if (plugin) row.lpips = plugin->score(pred, ref);
    rep.rows.push_back(std::move(row));
  }
  rep.recompute_means();
  return rep;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Tab-separated report: '#' header lines, one row per image, summary block.
inline void write_report(std::ostream& os, const MetricReport& rep) {
  os << "# tucan evaluation report\n";
  os << "# model\t" << rep.model << "\n";
  os << "# dataset\t" << rep.dataset << "\n";
  os << "# reference\tRGB from true L with true ab; prediction RGB from true L with predicted ab\n";
  os << "# psnr_cap_db\t" << fmt17(kPsnrCap) << "\n";
  os << "# ssim\tluma ITU-R 601, gaussian 11x11 sigma 1.5, K1 0.01, K2 0.03, range 255\n";
  os << "# lpips\t" << rep.lpips_plugin.value_or("n/a") << "\n";
  os << "path\tpsnr\tssim\tlpips\n";
  for (const auto& r : rep.rows)
    os << r.path << "\t" << fmt17(r.psnr) << "\t" << fmt17(r.ssim) << "\t" << (r.lpips ? fmt17(*r.lpips) : "n/a")
       << "\n";
  os << "# summary\n";
  os << "images\t" << rep.rows.size() << "\n";
  os << "mean_psnr\t" << fmt17(rep.mean_psnr) << "\n";
  os << "mean_ssim\t" << fmt17(rep.mean_ssim) << "\n";
  os << "mean_lpips\t" << (rep.mean_lpips ? fmt17(*rep.mean_lpips) : "n/a") << "\n";
}

inline std::string report_summary(const MetricReport& rep) {
  std::ostringstream os;
  os << "images " << rep.rows.size() << "  PSNR " << fmt17(rep.mean_psnr) << "  SSIM " << fmt17(rep.mean_ssim)
     << "  LPIPS " << (rep.mean_lpips ? fmt17(*rep.mean_lpips) : "n/a");
  return os.str();
}

/// Parses a report written by write_report.
inline MetricReport read_report(std::istream& is) {
  MetricReport rep;
  std::string line;
  bool rows = false, summary = false;
  const auto num = [](const std::string& s) { return s == "n/a" ? std::optional<double>() : std::optional(std::stod(s)); };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string t; std::getline(ls, t, '\t');) f.push_back(t);
    if (line[0] == '#') {
      if (f[0] == "# model" && f.size() > 1) rep.model = f[1];
      if (f[0] == "# dataset" && f.size() > 1) rep.dataset = f[1];
      if (f[0] == "# lpips" && f.size() > 1 && f[1] != "n/a") rep.lpips_plugin = f[1];
      if (f[0] == "# summary") summary = true;
      continue;
    }
    if (f.size() == 4 && f[0] == "path") {
      rows = true;
      continue;
    }
    if (summary && f.size() == 2) {
      if (f[0] == "mean_psnr") rep.mean_psnr = std::stod(f[1]);
      if (f[0] == "mean_ssim") rep.mean_ssim = std::stod(f[1]);
      if (f[0] == "mean_lpips") rep.mean_lpips = num(f[1]);
    } else if (rows && f.size() == 4) {
      rep.rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), num(f[3])});
    } else {
      throw ArtifactError("malformed report line: " + line);
    }
  }
  return rep;
}

}  // namespace tucan
