#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "tucan/error.hpp"
#include "tucan/resample.hpp"

namespace tucan {

// ---------------------------------------------------------------------------
// Rasters
// ---------------------------------------------------------------------------

/// Interleaved 8-bit raster, row-major HWC.
struct RgbImage {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int h, int w, int c = 3) : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0) {}

  std::uint8_t& at(int y, int x, int ch) { return data[(static_cast<std::size_t>(y) * width + x) * channels + ch]; }
  std::uint8_t at(int y, int x, int ch) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + ch]; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Chroma planes (a, b) in CIELab units.
struct AbImage {
  int height = 0;
  int width = 0;
  std::vector<double> a, b;

  AbImage() = default;
  AbImage(int h, int w) : height(h), width(w), a(static_cast<std::size_t>(h) * w, 0.0), b(a) {}
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
};

struct LabImage {
  int height = 0;
  int width = 0;
  std::vector<double> L, a, b;

  LabImage() = default;
  LabImage(int h, int w) : height(h), width(w), L(static_cast<std::size_t>(h) * w, 0.0), a(L), b(L) {}
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }

  AbImage chroma() const {
    AbImage ab;
    ab.height = height;
    ab.width = width;
    ab.a = a;
    ab.b = b;
    return ab;
  }
};

/// Bilinear resize of an AB raster (area averaging when shrinking if `area`).
inline AbImage resize(const AbImage& in, int h, int w, bool area) {
  AbImage out(h, w);
  if (area) {
    area_resize(in.a, in.height, in.width, out.a, h, w);
    area_resize(in.b, in.height, in.width, out.b, h, w);
  } else {
    bilinear_resize(in.a, in.height, in.width, out.a, h, w);
    bilinear_resize(in.b, in.height, in.width, out.b, h, w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// sRGB <-> CIELab (D65, 2 degree observer)
// ---------------------------------------------------------------------------

struct Lab {
  double L = 0, a = 0, b = 0;
};

namespace colorimetry {

inline constexpr std::array<double, 3> kWhiteD65{0.95047, 1.0, 1.08883};
inline constexpr double kEpsilon = 216.0 / 24389.0;
inline constexpr double kKappa = 24389.0 / 27.0;

inline constexpr double kXyzFromRgb[3][3] = {
    {0.412453, 0.357580, 0.180423}, {0.212671, 0.715160, 0.072169}, {0.019334, 0.119193, 0.950227}};
inline constexpr double kRgbFromXyz[3][3] = {{3.240481343200526, -1.5371515162713185, -0.4985363261688878},
                                             {-0.9692549499965682, 1.8759900014898907, 0.04155592655829284},
                                             {0.05564663913517716, -0.20404133836651123, 1.0573110696453443}};

inline double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }
inline double linear_to_srgb(double c) {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}
inline double lab_f(double t) { return t > kEpsilon ? std::cbrt(t) : (kKappa * t + 16.0) / 116.0; }

}  // namespace colorimetry

/// sRGB components in [0,1] to Lab.
inline Lab srgb_to_lab(double r, double g, double b) {
  using namespace colorimetry;
  const double lin[3] = {srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)};
  double f[3];
  for (int i = 0; i < 3; ++i) {
    const double v = kXyzFromRgb[i][0] * lin[0] + kXyzFromRgb[i][1] * lin[1] + kXyzFromRgb[i][2] * lin[2];
    f[i] = lab_f(v / kWhiteD65[i]);
  }
  return {116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])};
}

/// Lab to unclamped sRGB components (nominal range [0,1]).
inline std::array<double, 3> lab_to_srgb(const Lab& lab) {
  using namespace colorimetry;
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const auto inv = [](double f) {
    const double f3 = f * f * f;
    return f3 > kEpsilon ? f3 : (116.0 * f - 16.0) / kKappa;
  };
  const double xyz[3] = {inv(fx) * kWhiteD65[0],
                         (lab.L > kKappa * kEpsilon ? fy * fy * fy : lab.L / kKappa) * kWhiteD65[1],
                         inv(fz) * kWhiteD65[2]};
  std::array<double, 3> rgb{};
  for (int i = 0; i < 3; ++i) {
    const double lin = kRgbFromXyz[i][0] * xyz[0] + kRgbFromXyz[i][1] * xyz[1] + kRgbFromXyz[i][2] * xyz[2];
    rgb[i] = lin <= 0 ? 12.92 * lin : colorimetry::linear_to_srgb(lin);
  }
  return rgb;
}

inline std::uint8_t to_byte(double unit) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(unit * 255.0), 0L, 255L));
}

inline LabImage rgb_to_lab(const RgbImage& image) {
  if (image.channels != 3)
    throw ShapeError("rgb_to_lab: expected 3 channels, got " + std::to_string(image.channels));
  if (image.data.size() != image.pixels() * 3) throw ShapeError("rgb_to_lab: buffer size mismatch");
  LabImage lab(image.height, image.width);
  for (std::size_t p = 0; p < image.pixels(); ++p) {
    const auto* px = &image.data[p * 3];
    const Lab v = srgb_to_lab(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0);
    lab.L[p] = v.L;
    lab.a[p] = v.a;
    lab.b[p] = v.b;
  }
  return lab;
}

/// Lab to 8-bit RGB with per-channel clamping of out-of-gamut values.
inline RgbImage lab_to_rgb(const LabImage& lab) {
  RgbImage out(lab.height, lab.width, 3);
  for (std::size_t p = 0; p < lab.pixels(); ++p) {
    const auto rgb = lab_to_srgb({lab.L[p], lab.a[p], lab.b[p]});
    for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = to_byte(rgb[c]);
  }
  return out;
}

/// Lab to 8-bit RGB, pulling out-of-gamut chroma toward the neutral axis
/// (bisection on the chroma scale) instead of clamping channels, so the
/// lightness of the output stays at the requested L.
inline RgbImage lab_to_rgb_keep_lightness(const LabImage& lab) {
  RgbImage out(lab.height, lab.width, 3);
  const auto inside = [](const std::array<double, 3>& c) {
    return std::all_of(c.begin(), c.end(), [](double v) { return v >= -0.5 / 255 && v <= 1 + 0.5 / 255; });
  };
  for (std::size_t p = 0; p < lab.pixels(); ++p) {
    const double L = std::clamp(lab.L[p], 0.0, 100.0);
    auto rgb = lab_to_srgb({L, lab.a[p], lab.b[p]});
    if (!inside(rgb)) {
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 30; ++it) {
        const double mid = 0.5 * (lo + hi);
        (inside(lab_to_srgb({L, mid * lab.a[p], mid * lab.b[p]})) ? lo : hi) = mid;
      }
      rgb = lab_to_srgb({L, lo * lab.a[p], lo * lab.b[p]});
    }
    for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = to_byte(rgb[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quantized chroma
// ---------------------------------------------------------------------------

struct AbPoint {
  double a = 0, b = 0;
  friend bool operator==(const AbPoint&, const AbPoint&) = default;
};

/// The in-gamut lattice of (a,b) bin centres plus optional prior/weights.
/// Immutable after construction apart from fitting weights.
class BinTable {
 public:
  BinTable() = default;
  BinTable(double grid_size, std::vector<AbPoint> centers) : grid_(grid_size), centers_(std::move(centers)) {
    if (!(grid_ > 0)) throw InputError("BinTable: grid size must be positive");
    index_lattice();
  }

  double grid_size() const noexcept { return grid_; }
  int size() const noexcept { return static_cast<int>(centers_.size()); }
  const std::vector<AbPoint>& centers() const noexcept { return centers_; }
  const AbPoint& center(int q) const { return centers_.at(static_cast<std::size_t>(q)); }

  bool has_weights() const noexcept { return !weights_.empty(); }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::vector<double>& prior() const noexcept { return prior_; }
  double weight(int q) const { return weights_.empty() ? 1.0 : weights_[static_cast<std::size_t>(q)]; }

  void set_rebalance(std::vector<double> prior, std::vector<double> weights) {
    if (prior.size() != centers_.size() || weights.size() != centers_.size())
      throw ShapeError("BinTable: prior/weights length must equal Q");
    prior_ = std::move(prior);
    weights_ = std::move(weights);
  }

  /// Index of the lattice cell centred at (a,b), if it is in the table.
  std::optional<int> find(double a, double b) const {
    auto it = lattice_.find(key(std::llround(a / grid_), std::llround(b / grid_)));
    if (it == lattice_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const BinTable& x, const BinTable& y) {
    return x.grid_ == y.grid_ && x.centers_ == y.centers_ && x.weights_ == y.weights_;
  }

 private:
  static long long key(long long i, long long j) { return i * 1000003LL + j; }
  void index_lattice() {
    for (std::size_t q = 0; q < centers_.size(); ++q) {
      const auto& c = centers_[q];
      const long long i = std::llround(c.a / grid_), j = std::llround(c.b / grid_);
      if (std::abs(c.a - i * grid_) > 1e-9 || std::abs(c.b - j * grid_) > 1e-9)
        throw InputError("BinTable: centre off the lattice");
      if (!lattice_.emplace(key(i, j), static_cast<int>(q)).second) throw InputError("BinTable: duplicate centre");
    }
  }

  double grid_ = 10.0;
  std::vector<AbPoint> centers_;
  std::vector<double> prior_;
  std::vector<double> weights_;
  std::map<long long, int> lattice_;
};

/// Sweeps the sRGB cube (every `stride`-th level per channel, 255 always
/// included) and keeps every lattice cell some colour falls into. Centres are
/// sorted by (a, b), so the result does not depend on sweep order.
inline BinTable build_gamut_bins(double grid_size = 10.0, int stride = 4) {
  if (!(grid_size > 0)) throw InputError("build_gamut_bins: grid size must be positive");
  if (stride < 1) throw InputError("build_gamut_bins: stride must be >= 1");
  std::vector<int> levels;
  for (int v = 0; v < 256; v += stride) levels.push_back(v);
  if (levels.back() != 255) levels.push_back(255);

  std::vector<std::pair<long long, long long>> cells;
  for (int r : levels)
    for (int g : levels)
      for (int b : levels) {
        const Lab lab = srgb_to_lab(r / 255.0, g / 255.0, b / 255.0);
        cells.emplace_back(std::llround(lab.a / grid_size), std::llround(lab.b / grid_size));
      }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());

  std::vector<AbPoint> centers;
  centers.reserve(cells.size());
  for (auto [i, j] : cells) centers.push_back({static_cast<double>(i) * grid_size, static_cast<double>(j) * grid_size});
  return BinTable(grid_size, std::move(centers));
}

/// Euclidean-nearest bin centre; ties go to the lowest index.
inline int nearest_bin(const BinTable& bins, double a, double b) {
  if (bins.size() == 0) throw StateError("nearest_bin: empty bin table");
  const double g = bins.grid_size();
  // Fast path: the lattice cell containing the point is the nearest centre
  // whenever it is present and the point is not on a cell boundary.
  const double fa = a / g - std::floor(a / g), fb = b / g - std::floor(b / g);
  if (fa != 0.5 && fb != 0.5) {
    if (auto q = bins.find(a, b)) return *q;
  }
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int q = 0; q < bins.size(); ++q) {
    const auto& c = bins.centers()[static_cast<std::size_t>(q)];
    const double d = (c.a - a) * (c.a - a) + (c.b - b) * (c.b - b);
    if (d < best_d) {
      best_d = d;
      best = q;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Soft encoding
// ---------------------------------------------------------------------------

/// Dense per-pixel distribution over bins, row-major H*W*Q.
struct ColorDistribution {
  int height = 0;
  int width = 0;
  int bins = 0;
  std::vector<double> values;

  ColorDistribution() = default;
  ColorDistribution(int h, int w, int q)
      : height(h), width(w), bins(q), values(static_cast<std::size_t>(h) * w * q, 0.0) {}
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  std::span<double> pixel(std::size_t p) { return {values.data() + p * bins, static_cast<std::size_t>(bins)}; }
  std::span<const double> pixel(std::size_t p) const {
    return {values.data() + p * bins, static_cast<std::size_t>(bins)};
  }
};

struct SoftEncodingParams {
  int neighbours = 5;
  double sigma = 5.0;
};

/// Sparse ground-truth encoding: K (bin, weight) pairs per pixel.
struct SoftEncoding {
  int height = 0;
  int width = 0;
  int bins = 0;  // Q of the table used
  int k = 0;
  std::vector<int> index;      // pixels*k
  std::vector<double> weight;  // pixels*k

  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }

  ColorDistribution dense() const {
    ColorDistribution z(height, width, bins);
    for (std::size_t p = 0; p < pixels(); ++p)
      for (int j = 0; j < k; ++j) z.values[p * bins + index[p * k + j]] += weight[p * k + j];
    return z;
  }

  /// Bin with the largest weight (lowest index on ties).
  int argmax(std::size_t p) const {
    int best = index[p * k];
    double bw = weight[p * k];
    for (int j = 1; j < k; ++j) {
      const int q = index[p * k + j];
      const double w = weight[p * k + j];
      if (w > bw || (w == bw && q < best)) {
        bw = w;
        best = q;
      }
    }
    return best;
  }
};

inline SoftEncoding soft_encode_sparse(const AbImage& ab, const BinTable& bins, SoftEncodingParams params = {}) {
  if (bins.size() == 0) throw StateError("soft_encode: empty bin table");
  if (ab.a.size() != ab.pixels() || ab.b.size() != ab.pixels()) throw ShapeError("soft_encode: raster size mismatch");
  const int k = std::min(params.neighbours, bins.size());
  SoftEncoding enc;
  enc.height = ab.height;
  enc.width = ab.width;
  enc.bins = bins.size();
  enc.k = k;
  enc.index.resize(ab.pixels() * k);
  enc.weight.resize(ab.pixels() * k);
  const double inv2s2 = 1.0 / (2.0 * params.sigma * params.sigma);

  std::vector<std::pair<double, int>> best(static_cast<std::size_t>(k));
  for (std::size_t p = 0; p < ab.pixels(); ++p) {
    const double a = ab.a[p], b = ab.b[p];
    if (!std::isfinite(a) || !std::isfinite(b)) throw InputError("soft_encode: non-finite chroma");
    // Running top-k by (distance, index).
    int filled = 0;
    for (int q = 0; q < bins.size(); ++q) {
      const auto& c = bins.centers()[static_cast<std::size_t>(q)];
      const double d = (c.a - a) * (c.a - a) + (c.b - b) * (c.b - b);
      if (filled == k && d >= best[k - 1].first) continue;
      int pos = filled < k ? filled++ : k - 1;
      while (pos > 0 && best[pos - 1].first > d) {
        best[pos] = best[pos - 1];
        --pos;
      }
      best[pos] = {d, q};
    }
    // Shift by the nearest distance so far-away pixels do not underflow.
    const double d0 = best[0].first;
    double sum = 0;
    for (int j = 0; j < k; ++j) {
      const double w = std::exp(-(best[j].first - d0) * inv2s2);
      enc.index[p * k + j] = best[j].second;
      enc.weight[p * k + j] = w;
      sum += w;
    }
    for (int j = 0; j < k; ++j) enc.weight[p * k + j] /= sum;
  }
  return enc;
}

inline ColorDistribution soft_encode(const AbImage& ab, const BinTable& bins, SoftEncodingParams params = {}) {
  return soft_encode_sparse(ab, bins, params).dense();
}

/// Per-pixel expectation of bin centres under (normalised) Z.
inline AbImage decode_expectation(const ColorDistribution& z, const BinTable& bins) {
  if (z.bins != bins.size()) throw ShapeError("decode_expectation: distribution has " + std::to_string(z.bins) +
                                              " bins, table has " + std::to_string(bins.size()));
  AbImage out(z.height, z.width);
  for (std::size_t p = 0; p < z.pixels(); ++p) {
    const auto v = z.pixel(p);
    double sum = 0, a = 0, b = 0;
    for (int q = 0; q < z.bins; ++q) {
      if (v[q] < 0 || !std::isfinite(v[q])) throw InputError("decode_expectation: negative or non-finite weight");
      sum += v[q];
      a += v[q] * bins.centers()[q].a;
      b += v[q] * bins.centers()[q].b;
    }
    if (sum <= 0) throw InputError("decode_expectation: all-zero distribution at pixel " + std::to_string(p));
    out.a[p] = a / sum;
    out.b[p] = b / sum;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class re-balancing
// ---------------------------------------------------------------------------

struct RebalanceParams {
  double lambda = 0.5;
  double sigma = 5.0;  // prior smoothing in chroma units; 0 disables
};

/// Hard-assignment histogram of chroma over the bins, normalised to sum 1.
inline std::vector<double> empirical_prior(std::span<const AbImage> sample, const BinTable& bins) {
  std::vector<double> counts(static_cast<std::size_t>(bins.size()), 0.0);
  std::size_t total = 0;
  for (const auto& img : sample)
    for (std::size_t p = 0; p < img.pixels(); ++p) {
      counts[static_cast<std::size_t>(nearest_bin(bins, img.a[p], img.b[p]))] += 1.0;
      ++total;
    }
  if (total == 0) throw InputError("empirical_prior: empty dataset sample");
  for (auto& c : counts) c /= static_cast<double>(total);
  return counts;
}

/// Fills prior and weights: v_q proportional to ((1-lambda) p~_q + lambda/Q)^-1
/// with p~ the kernel-smoothed prior, scaled so that sum_q p~_q v_q = 1.
inline BinTable fit_rebalance_weights(BinTable bins, std::span<const double> prior, RebalanceParams params = {}) {
  const auto Q = static_cast<std::size_t>(bins.size());
  if (prior.size() != Q) throw ShapeError("fit_rebalance_weights: prior length must equal Q");
  if (params.lambda < 0 || params.lambda > 1) throw InputError("fit_rebalance_weights: lambda outside [0,1]");
  double mass = 0;
  for (double p : prior) {
    if (p < 0 || !std::isfinite(p)) throw InputError("fit_rebalance_weights: invalid prior entry");
    mass += p;
  }
  if (mass <= 0) throw InputError("fit_rebalance_weights: empty prior");

  std::vector<double> smooth(Q);
  if (params.sigma > 0) {
    // Normalised kernel average, so a uniform prior stays uniform.
    const double inv2s2 = 1.0 / (2.0 * params.sigma * params.sigma);
    for (std::size_t q = 0; q < Q; ++q) {
      double num = 0, den = 0;
      for (std::size_t r = 0; r < Q; ++r) {
        const double da = bins.centers()[q].a - bins.centers()[r].a, db = bins.centers()[q].b - bins.centers()[r].b;
        const double k = std::exp(-(da * da + db * db) * inv2s2);
        num += k * prior[r];
        den += k;
      }
      smooth[q] = num / den;
    }
  } else {
    std::copy(prior.begin(), prior.end(), smooth.begin());
  }
  const double s = std::accumulate(smooth.begin(), smooth.end(), 0.0);
  for (auto& p : smooth) p /= s;

  std::vector<double> w(Q);
  double norm = 0;
  for (std::size_t q = 0; q < Q; ++q) {
    w[q] = 1.0 / ((1.0 - params.lambda) * smooth[q] + params.lambda / static_cast<double>(Q));
    norm += smooth[q] * w[q];
  }
  for (auto& v : w) v /= norm;
  bins.set_rebalance(std::move(smooth), std::move(w));
  return bins;
}

inline BinTable fit_rebalance_weights(BinTable bins, std::span<const AbImage> sample, RebalanceParams params = {}) {
  const auto prior = empirical_prior(sample, bins);
  return fit_rebalance_weights(std::move(bins), prior, params);
}

// ---------------------------------------------------------------------------
// Bin table file: header "grid=G Q=N", then "index a b [weight]" per line.
// ---------------------------------------------------------------------------

inline void write_bin_table(std::ostream& os, const BinTable& bins) {
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  os << "grid=" << num(bins.grid_size()) << " Q=" << bins.size() << "\n";
  for (int q = 0; q < bins.size(); ++q) {
    os << q << ' ' << num(bins.center(q).a) << ' ' << num(bins.center(q).b);
    if (bins.has_weights()) os << ' ' << num(bins.weights()[q]);
    os << '\n';
  }
}

inline std::string bin_table_text(const BinTable& bins) {
  std::ostringstream os;
  write_bin_table(os, bins);
  return os.str();
}

inline BinTable read_bin_table(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw ArtifactError("bin table: missing header");
  double grid = 0;
  int q_count = -1;
  {
    std::istringstream hs(header);
    std::string tok;
    while (hs >> tok) {
      if (tok.rfind("grid=", 0) == 0) grid = std::stod(tok.substr(5));
      else if (tok.rfind("Q=", 0) == 0) q_count = std::stoi(tok.substr(2));
    }
  }
  if (!(grid > 0) || q_count < 0) throw ArtifactError("bin table: malformed header '" + header + "'");
  std::vector<AbPoint> centers;
  std::vector<double> weights;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int idx = -1;
    AbPoint c;
    if (!(ls >> idx >> c.a >> c.b) || idx != static_cast<int>(centers.size()))
      throw ArtifactError("bin table: malformed line '" + line + "'");
    double w;
    if (ls >> w) weights.push_back(w);
    centers.push_back(c);
  }
  if (static_cast<int>(centers.size()) != q_count)
    throw ArtifactError("bin table: header says Q=" + std::to_string(q_count) + ", found " +
                        std::to_string(centers.size()));
  if (!weights.empty() && weights.size() != centers.size())
    throw ArtifactError("bin table: weight column present on only some lines");
  BinTable table(grid, std::move(centers));
  if (!weights.empty()) table.set_rebalance(std::vector<double>(weights.size(), 1.0 / weights.size()), weights);
  return table;
}

}  // namespace tucan
