#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "mia/rng.hpp"
#include "mia/tape.hpp"
#include "mia/tensor.hpp"

namespace mia {

enum class Mode { train, eval };

namespace detail {

inline void expect_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void expect_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void accumulate(const Tensor& dst, const std::vector<double>& g) {
  if (!dst.requires_grad()) return;
  auto buf = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

// Raw C += A * B over row-major buffers; A is m x p, B is p x n.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t p,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = a[i * p + k];
      if (aik == 0.0) continue;
      const double* brow = b + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

} // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_matrix(a, "matmul");
  detail::expect_matrix(b, "matmul");
  const std::size_t m = a.rows(), p = a.cols(), n = b.cols();
  if (b.rows() != p)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor out({m, n});
  detail::gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, p, n);
  return tape.record("matmul", {a, b}, out, [a, b, out, m, p, n]() mutable {
    const auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < p; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[k * n + j];
          ga[i * p + k] += s;
        }
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < p; ++k) {
          const double aik = a[i * p + k];
          for (std::size_t j = 0; j < n; ++j) gb[k * n + j] += aik * g[i * n + j];
        }
    }
  });
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  detail::expect_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x[i * n + j];
  return tape.record("transpose", {x}, out, [x, out, m, n]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_same(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return tape.record("add", {a, b}, out, [a, b, out]() mutable {
    const auto g = out.grad();
    std::vector<double> gv(g.begin(), g.end());
    detail::accumulate(a, gv);
    detail::accumulate(b, gv);
  });
}

/// x[m x n] + r, with r a length-n vector added to every row.
inline Tensor add_broadcast_row(Tape& tape, const Tensor& x, const Tensor& r) {
  detail::expect_matrix(x, "add_broadcast_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (r.numel() != n)
    throw ShapeError("add_broadcast_row: row of " + shape_str(r.shape()) + " against " +
                     shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + r[j];
  return tape.record("add_broadcast_row", {x, r}, out, [x, r, out, m, n]() mutable {
    const auto g = out.grad();
    detail::accumulate(x, std::vector<double>(g.begin(), g.end()));
    if (r.requires_grad()) {
      auto gr = r.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
    }
  });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return tape.record("mul", {a, b}, out, [a, b, out]() mutable {
    const auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = c * x[i];
  return tape.record("scale", {x}, out, [x, out, c]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

namespace detail {

// Shared shape of the pointwise nonlinearities: forward f, derivative from (x, y).
template <class F, class DF>
Tensor pointwise(Tape& tape, const char* name, const Tensor& x, F f, DF df) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return tape.record(name, {x}, out, [x, out, df]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], out[i]);
  });
}

} // namespace detail

inline Tensor relu(Tape& tape, const Tensor& x) {
  return detail::pointwise(
      tape, "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(Tape& tape, const Tensor& x) {
  return detail::pointwise(
      tape, "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  return detail::pointwise(
      tape, "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

/// Row-wise softmax, stabilized by subtracting each row's max.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
  detail::expect_matrix(x, "softmax_rows");
  require_finite(x, "softmax_rows input");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data().data() + i * n;
    double* yr = out.data().data() + i * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return tape.record("softmax_rows", {x}, out, [x, out, m, n]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * out[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += out[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

/// Per-row (x - mean) / sqrt(var + eps) * gain + bias, with the biased variance.
inline Tensor layer_norm_rows(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
  detail::expect_matrix(x, "layer_norm_rows");
  const std::size_t m = x.rows(), d = x.cols();
  if (d < 2) throw ShapeError("layer_norm_rows: need at least 2 columns, got " + shape_str(x.shape()));
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm_rows: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " against " + shape_str(x.shape()));
  Tensor out(x.shape());
  std::vector<double> xhat(m * d), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x[i * d + j] - mean) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
    }
  }
  return tape.record(
      "layer_norm_rows", {x, gain, bias}, out,
      [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), m, d]() mutable {
        const auto g = out.grad();
        if (gain.requires_grad() || bias.requires_grad()) {
          std::vector<double> gg(d, 0.0), gb(d, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[i * d + j] * xhat[i * d + j];
              gb[j] += g[i * d + j];
            }
          detail::accumulate(gain, gg);
          detail::accumulate(bias, gb);
        }
        if (!x.requires_grad()) return;
        auto gx = x.grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[i * d + j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[i * d + j];
          }
          mean_dxhat *= inv_d;
          mean_dxhat_xhat *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[i * d + j] * gain[j];
            gx[i * d + j] += inv_std[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
          }
        }
      });
}

/// Inverted dropout: train mode zeroes with probability p and rescales the
/// survivors by 1/(1-p); eval mode (or p == 0) returns x itself.
inline Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0))
    throw ContractError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = x[i] * mask[i];
  }
  return tape.record("dropout", {x}, out, [x, out, mask = std::move(mask)]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::expect_matrix(p, "concat_cols");
    if (p.rows() != m)
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * total + off + j] = p[i * p.cols() + j];
    off += p.cols();
  }
  return tape.record("concat_cols", parts, out, [parts, out, m, total]() mutable {
    const auto g = out.grad();
    std::size_t off = 0;
    for (auto& p : parts) {
      const std::size_t c = p.cols();
      if (p.requires_grad()) {
        auto gp = p.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
      }
      off += c;
    }
  });
}

inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
  detail::expect_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || begin + count > n)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + begin + j];
  return tape.record("slice_cols", {x}, out, [x, out, m, n, begin, count]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += g[i * count + j];
  });
}

/// Column-wise average row of X[m x d], returned as 1 x d.
inline Tensor mean_rows(Tape& tape, const Tensor& x) {
  detail::expect_matrix(x, "mean_rows");
  const std::size_t m = x.rows(), d = x.cols();
  Tensor out({1, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += x[i * d + j];
  for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(m);
  return tape.record("mean_rows", {x}, out, [x, out, m, d]() mutable {
    if (!x.requires_grad()) return;
    const auto g = out.grad();
    auto gx = x.grad();
    const double w = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += w * g[j];
  });
}

/// Row `id` of table[V x d] as a 1 x d tensor.
inline Tensor embedding_lookup(Tape& tape, const Tensor& table, std::size_t id) {
  detail::expect_matrix(table, "embedding_lookup");
  if (id >= table.rows())
    throw ContractError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                        std::to_string(table.rows()) + " rows");
  const std::size_t d = table.cols();
  Tensor out({1, d});
  for (std::size_t j = 0; j < d; ++j) out[j] = table[id * d + j];
  return tape.record("embedding_lookup", {table}, out, [table, out, id, d]() mutable {
    if (!table.requires_grad()) return;
    const auto g = out.grad();
    auto gt = table.grad();
    for (std::size_t j = 0; j < d; ++j) gt[id * d + j] += g[j];
  });
}

/// Negative log-likelihood of `target` under softmax(logits); logits is 1 x V.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::size_t target) {
  detail::expect_matrix(logits, "cross_entropy");
  if (logits.rows() != 1) throw ShapeError("cross_entropy: expected 1 x V logits, got " + shape_str(logits.shape()));
  const std::size_t v = logits.cols();
  if (target >= v)
    throw ContractError("cross_entropy: target " + std::to_string(target) + " outside " +
                        std::to_string(v) + " classes");
  const double mx = *std::max_element(logits.data().begin(), logits.data().end());
  std::vector<double> probs(v);
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += (probs[j] = std::exp(logits[j] - mx));
  for (auto& p : probs) p /= z;
  Tensor out({1, 1});
  out[0] = std::log(z) + mx - logits[target];
  return tape.record("cross_entropy", {logits}, out,
                     [logits, out, probs = std::move(probs), target]() mutable {
                       if (!logits.requires_grad()) return;
                       const double g = out.grad()[0];
                       auto gl = logits.grad();
                       for (std::size_t j = 0; j < probs.size(); ++j)
                         gl[j] += g * (probs[j] - (j == target ? 1.0 : 0.0));
                     });
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out({1, 1});
  for (double v : x.data()) out[0] += v;
  return tape.record("sum", {x}, out, [x, out]() mutable {
    if (!x.requires_grad()) return;
    const double g = out.grad()[0];
    for (auto& gx : x.grad()) gx += g;
  });
}

} // namespace mia
