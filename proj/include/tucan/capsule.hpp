#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tucan/error.hpp"

namespace tucan::capsule {

// Capsule vectors are stored contiguously: capsule i occupies
// data[i*dim, (i+1)*dim).

/// Column capsules u_i of dimension `dim`; `groups x height x width` is the
/// spatial arrangement they were flattened from.
struct CapsuleBank {
  int dim = 0;
  int count = 0;
  int groups = 1, height = 1, width = 1;
  std::vector<double> data;

  CapsuleBank() = default;
  CapsuleBank(int d, int n) : dim(d), count(n), height(1), width(n), data(static_cast<std::size_t>(d) * n, 0.0) {}

  std::span<double> operator[](int i) { return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)}; }
  std::span<const double> operator[](int i) const {
    return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
};

/// u_hat_{j|i} laid out as [in][out][dim].
struct VoteTensor {
  int in = 0, out = 0, dim = 0;
  std::vector<double> data;

  VoteTensor() = default;
  VoteTensor(int i, int o, int d) : in(i), out(o), dim(d), data(static_cast<std::size_t>(i) * o * d, 0.0) {}

  double* vote(int i, int j) { return data.data() + (static_cast<std::size_t>(i) * out + j) * dim; }
  const double* vote(int i, int j) const { return data.data() + (static_cast<std::size_t>(i) * out + j) * dim; }
};

/// Per-pair linear maps. `rows x cols` matrices stored row-major, laid out
/// [in][out]. For votes rows = out dim (k_hat), cols = in dim (k); for the
/// de-routing maps rows = k, cols = k_hat.
struct PairWeights {
  int in = 0, out = 0, rows = 0, cols = 0;
  std::vector<double> data;

  PairWeights() = default;
  PairWeights(int i, int o, int r, int c)
      : in(i), out(o), rows(r), cols(c), data(static_cast<std::size_t>(i) * o * r * c, 0.0) {}

  std::size_t block() const noexcept { return static_cast<std::size_t>(rows) * cols; }
  double* matrix(int i, int j) { return data.data() + (static_cast<std::size_t>(i) * out + j) * block(); }
  const double* matrix(int i, int j) const { return data.data() + (static_cast<std::size_t>(i) * out + j) * block(); }
};

struct RoutingResult {
  int out = 0, dim = 0;
  std::vector<double> V;  // out x dim
  std::vector<double> C;  // in x out
  int iterations = 0;

  std::span<const double> v(int j) const {
    return {V.data() + static_cast<std::size_t>(j) * dim, static_cast<std::size_t>(dim)};
  }
  double c(int i, int j) const { return C[static_cast<std::size_t>(i) * out + j]; }
};

// ---------------------------------------------------------------------------
// squash
// ---------------------------------------------------------------------------

/// v = |s|^2/(1+|s|^2) * s/|s|; the zero vector maps to zero.
inline void squash(std::span<const double> s, std::span<double> v) {
  double n2 = 0;
  for (double x : s) n2 += x * x;
  if (n2 == 0) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  const double n = std::sqrt(n2);
  const double scale = n / (1.0 + n2);
  for (std::size_t d = 0; d < s.size(); ++d) v[d] = scale * s[d];
}

inline std::vector<double> squash(std::span<const double> s) {
  std::vector<double> v(s.size());
  squash(s, v);
  return v;
}

/// Accumulates dL/ds into `gs` given dL/dv.
inline void squash_backward(std::span<const double> s, std::span<const double> gv, std::span<double> gs) {
  double n2 = 0, sg = 0;
  for (std::size_t d = 0; d < s.size(); ++d) {
    n2 += s[d] * s[d];
    sg += s[d] * gv[d];
  }
  if (n2 == 0) return;  // Jacobian vanishes at the origin
  const double n = std::sqrt(n2);
  const double f = n / (1.0 + n2);
  const double fprime_over_n = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n;
  for (std::size_t d = 0; d < s.size(); ++d) gs[d] += f * gv[d] + fprime_over_n * sg * s[d];
}

// ---------------------------------------------------------------------------
// Vote projection and de-routing
// ---------------------------------------------------------------------------

/// u_hat_{j|i} = W_ij u_i for every (i, j).
inline VoteTensor project_votes(const CapsuleBank& u, const PairWeights& w) {
  if (w.in != u.count || w.cols != u.dim)
    throw ShapeError("project_votes: weights are " + std::to_string(w.in) + " x (" + std::to_string(w.rows) + "x" +
                     std::to_string(w.cols) + "), capsules are " + std::to_string(u.count) + " x " +
                     std::to_string(u.dim));
  VoteTensor votes(u.count, w.out, w.rows);
  for (int i = 0; i < u.count; ++i) {
    const auto ui = u[i];
    for (int j = 0; j < w.out; ++j) {
      const double* m = w.matrix(i, j);
      double* o = votes.vote(i, j);
      for (int r = 0; r < w.rows; ++r) {
        double acc = 0;
        for (int c = 0; c < w.cols; ++c) acc += m[r * w.cols + c] * ui[c];
        o[r] = acc;
      }
    }
  }
  return votes;
}

/// Accumulates gradients of project_votes into `gw` and `gu`.
inline void project_votes_backward(const CapsuleBank& u, const PairWeights& w, const VoteTensor& gvotes,
                                   PairWeights& gw, CapsuleBank& gu) {
  for (int i = 0; i < u.count; ++i) {
    const auto ui = u[i];
    auto gui = gu[i];
    for (int j = 0; j < w.out; ++j) {
      const double* m = w.matrix(i, j);
      double* gm = gw.matrix(i, j);
      const double* g = gvotes.vote(i, j);
      for (int r = 0; r < w.rows; ++r) {
        const double gr = g[r];
        if (gr == 0) continue;
        for (int c = 0; c < w.cols; ++c) {
          gm[r * w.cols + c] += gr * ui[c];
          gui[c] += gr * m[r * w.cols + c];
        }
      }
    }
  }
}

/// u^r_i = sum_j W^r_{ji} v_j, giving a bank with the forward capsule layout.
inline CapsuleBank deroute(std::span<const double> V, int out, const PairWeights& wr) {
  if (wr.out != out || V.size() != static_cast<std::size_t>(out) * wr.cols)
    throw ShapeError("deroute: entity vectors do not match de-routing weights");
  CapsuleBank ur(wr.rows, wr.in);
  for (int i = 0; i < wr.in; ++i) {
    auto ui = ur[i];
    for (int j = 0; j < out; ++j) {
      const double* m = wr.matrix(i, j);
      const double* vj = V.data() + static_cast<std::size_t>(j) * wr.cols;
      for (int r = 0; r < wr.rows; ++r) {
        double acc = 0;
        for (int c = 0; c < wr.cols; ++c) acc += m[r * wr.cols + c] * vj[c];
        ui[r] += acc;
      }
    }
  }
  return ur;
}

inline void deroute_backward(std::span<const double> V, int out, const PairWeights& wr, const CapsuleBank& gur,
                             PairWeights& gwr, std::span<double> gV) {
  for (int i = 0; i < wr.in; ++i) {
    const auto g = gur[i];
    for (int j = 0; j < out; ++j) {
      const double* m = wr.matrix(i, j);
      double* gm = gwr.matrix(i, j);
      const double* vj = V.data() + static_cast<std::size_t>(j) * wr.cols;
      double* gvj = gV.data() + static_cast<std::size_t>(j) * wr.cols;
      for (int r = 0; r < wr.rows; ++r) {
        const double gr = g[r];
        if (gr == 0) continue;
        for (int c = 0; c < wr.cols; ++c) {
          gm[r * wr.cols + c] += gr * vj[c];
          gvj[c] += gr * m[r * wr.cols + c];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Routing by agreement
// ---------------------------------------------------------------------------

/// Intermediate state kept for the backward pass.
struct RoutingTrace {
  std::vector<std::vector<double>> c;  // per iteration, in x out
  std::vector<std::vector<double>> s;  // per iteration, out x dim
  std::vector<std::vector<double>> v;  // per iteration, out x dim
};

namespace detail {

inline void softmax_rows(const std::vector<double>& b, int in, int out, std::vector<double>& c) {
  c.resize(b.size());
  for (int i = 0; i < in; ++i) {
    const double* bi = b.data() + static_cast<std::size_t>(i) * out;
    double* ci = c.data() + static_cast<std::size_t>(i) * out;
    const double mx = *std::max_element(bi, bi + out);
    double sum = 0;
    for (int j = 0; j < out; ++j) sum += ci[j] = std::exp(bi[j] - mx);
    for (int j = 0; j < out; ++j) ci[j] /= sum;
  }
}

}  // namespace detail

/// Dynamic routing: logits start at zero; each iteration takes the per-input
/// softmax over outputs, forms s_j = sum_i c_ij u_hat_{j|i}, squashes it and
/// adds the agreement u_hat_{j|i} . v_j to the logits.
inline RoutingResult route(const VoteTensor& votes, int iterations, RoutingTrace* trace = nullptr) {
  if (votes.out <= 0) throw ShapeError("route: zero output capsules");
  if (iterations < 1) throw InputError("route: iterations must be >= 1");
  const int in = votes.in, out = votes.out, dim = votes.dim;
  std::vector<double> b(static_cast<std::size_t>(in) * out, 0.0), c, s(static_cast<std::size_t>(out) * dim),
      v(s.size());
  if (trace) *trace = {};
  for (int t = 0; t < iterations; ++t) {
    detail::softmax_rows(b, in, out, c);
    std::fill(s.begin(), s.end(), 0.0);
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < out; ++j) {
        const double cij = c[static_cast<std::size_t>(i) * out + j];
        const double* u = votes.vote(i, j);
        double* sj = s.data() + static_cast<std::size_t>(j) * dim;
        for (int d = 0; d < dim; ++d) sj[d] += cij * u[d];
      }
    for (int j = 0; j < out; ++j)
      squash({s.data() + static_cast<std::size_t>(j) * dim, static_cast<std::size_t>(dim)},
             {v.data() + static_cast<std::size_t>(j) * dim, static_cast<std::size_t>(dim)});
    if (trace) {
      trace->c.push_back(c);
      trace->s.push_back(s);
      trace->v.push_back(v);
    }
    if (t + 1 < iterations) {
      for (int i = 0; i < in; ++i)
        for (int j = 0; j < out; ++j) {
          const double* u = votes.vote(i, j);
          const double* vj = v.data() + static_cast<std::size_t>(j) * dim;
          double agree = 0;
          for (int d = 0; d < dim; ++d) agree += u[d] * vj[d];
          b[static_cast<std::size_t>(i) * out + j] += agree;
        }
    }
  }
  return {out, dim, std::move(v), std::move(c), iterations};
}

/// Backpropagates dL/dV through every routing iteration (including the
/// logit updates) and accumulates dL/d(u_hat) into `gvotes`.
inline void route_backward(const VoteTensor& votes, const RoutingTrace& trace, std::span<const double> gV,
                           VoteTensor& gvotes) {
  const int in = votes.in, out = votes.out, dim = votes.dim;
  const int T = static_cast<int>(trace.c.size());
  std::vector<double> gb_next(static_cast<std::size_t>(in) * out, 0.0), gb(gb_next.size()), gv(gV.size()),
      gs(gV.size()), gc(gb_next.size());
  for (int t = T - 1; t >= 0; --t) {
    const auto& c = trace.c[t];
    const auto& s = trace.s[t];
    const auto& v = trace.v[t];
    // dL/dv_t: direct for the last iteration, via the logit update otherwise.
    if (t == T - 1) {
      std::copy(gV.begin(), gV.end(), gv.begin());
    } else {
      std::fill(gv.begin(), gv.end(), 0.0);
      for (int i = 0; i < in; ++i)
        for (int j = 0; j < out; ++j) {
          const double g = gb_next[static_cast<std::size_t>(i) * out + j];
          if (g == 0) continue;
          const double* u = votes.vote(i, j);
          double* gu = gvotes.vote(i, j);
          const double* vj = v.data() + static_cast<std::size_t>(j) * dim;
          double* gvj = gv.data() + static_cast<std::size_t>(j) * dim;
          for (int d = 0; d < dim; ++d) {
            gvj[d] += g * u[d];
            gu[d] += g * vj[d];
          }
        }
    }
    std::fill(gs.begin(), gs.end(), 0.0);
    for (int j = 0; j < out; ++j) {
      const std::size_t off = static_cast<std::size_t>(j) * dim;
      squash_backward({s.data() + off, static_cast<std::size_t>(dim)}, {gv.data() + off, static_cast<std::size_t>(dim)},
                      {gs.data() + off, static_cast<std::size_t>(dim)});
    }
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < out; ++j) {
        const double cij = c[static_cast<std::size_t>(i) * out + j];
        const double* u = votes.vote(i, j);
        double* gu = gvotes.vote(i, j);
        const double* gsj = gs.data() + static_cast<std::size_t>(j) * dim;
        double dot = 0;
        for (int d = 0; d < dim; ++d) {
          dot += gsj[d] * u[d];
          gu[d] += cij * gsj[d];
        }
        gc[static_cast<std::size_t>(i) * out + j] = dot;
      }
    // Logits: identity carry from the next iteration plus the softmax Jacobian.
    for (int i = 0; i < in; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * out;
      double cg = 0;
      for (int j = 0; j < out; ++j) cg += c[row + j] * gc[row + j];
      for (int j = 0; j < out; ++j) gb[row + j] = gb_next[row + j] + c[row + j] * (gc[row + j] - cg);
    }
    std::swap(gb, gb_next);
  }
}

}  // namespace tucan::capsule
