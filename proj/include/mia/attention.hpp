#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mia/ops.hpp"
#include "mia/params.hpp"

namespace mia {

// Projection weights of one head; each is d_h x d_k.
struct HeadParams {
  Tensor wq, wk, wv;
};

struct MultiHeadParams {
  std::vector<HeadParams> heads;
  Tensor wo; // d_h x d_h

  static MultiHeadParams init(std::size_t d_h, std::size_t k, Rng& rng) {
    if (k == 0 || d_h % k != 0)
      throw ConfigError("head count " + std::to_string(k) + " must divide feature width " +
                        std::to_string(d_h));
    const std::size_t d_k = d_h / k;
    MultiHeadParams p;
    for (std::size_t i = 0; i < k; ++i)
      p.heads.push_back({glorot(d_h, d_k, rng), glorot(d_h, d_k, rng), glorot(d_h, d_k, rng)});
    p.wo = glorot(d_h, d_h, rng);
    return p;
  }

  void append_to(ParamList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const std::string h = prefix + ".head" + std::to_string(i);
      out.push_back({h + ".wq", heads[i].wq});
      out.push_back({h + ".wk", heads[i].wk});
      out.push_back({h + ".wv", heads[i].wv});
    }
    out.push_back({prefix + ".wo", wo});
  }
};

// Position-wise two-layer network max(0, X W1 + b1) W2 + b2.
struct FcnParams {
  Tensor w1, b1, w2, b2;

  static FcnParams init(std::size_t d_h, std::size_t d_ff, Rng& rng) {
    if (d_ff == 0) throw ConfigError("fcn hidden width must be positive");
    return {glorot(d_h, d_ff, rng), param_vector(d_ff, 0.0), glorot(d_ff, d_h, rng),
            param_vector(d_h, 0.0)};
  }

  void append_to(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
  }
};

struct LayerNormParams {
  Tensor gain, bias;

  static LayerNormParams init(std::size_t d) { return {param_vector(d, 1.0), param_vector(d, 0.0)}; }

  void append_to(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

struct HeadResult {
  Tensor out;     // m x d_k
  Tensor weights; // m x n, rows sum to one
};

/// One scaled dot-product head: softmax(Q Wq (S Wk)^T / sqrt(d_k)) S Wv.
inline HeadResult attend_head(Tape& tape, const Tensor& q, const Tensor& s, const HeadParams& h) {
  if (q.cols() != s.cols())
    throw ShapeError("attend_head: query width " + shape_str(q.shape()) + " vs source width " +
                     shape_str(s.shape()));
  const double d_k = static_cast<double>(h.wq.cols());
  Tensor qp = matmul(tape, q, h.wq);
  Tensor kp = matmul(tape, s, h.wk);
  Tensor vp = matmul(tape, s, h.wv);
  Tensor logits = scale(tape, matmul(tape, qp, transpose(tape, kp)), 1.0 / std::sqrt(d_k));
  Tensor w = softmax_rows(tape, logits);
  return {matmul(tape, w, vp), w};
}

struct MultiHeadResult {
  Tensor out;                  // m x d_h
  std::vector<Tensor> weights; // one m x n matrix per head

  // Average of the per-head weight matrices, detached from the tape.
  Tensor mean_weights() const {
    Tensor avg(weights.front().shape());
    for (const auto& w : weights)
      for (std::size_t i = 0; i < avg.numel(); ++i) avg[i] += w[i];
    for (auto& v : avg.data()) v /= static_cast<double>(weights.size());
    return avg;
  }
};

inline MultiHeadResult multi_head(Tape& tape, const Tensor& q, const Tensor& s, const MultiHeadParams& p) {
  std::vector<Tensor> outs, weights;
  outs.reserve(p.heads.size());
  weights.reserve(p.heads.size());
  for (const auto& h : p.heads) {
    auto r = attend_head(tape, q, s, h);
    outs.push_back(r.out);
    weights.push_back(r.weights);
  }
  Tensor cat = outs.size() == 1 ? outs.front() : concat_cols(tape, outs);
  return {matmul(tape, cat, p.wo), std::move(weights)};
}

inline Tensor fcn(Tape& tape, const Tensor& x, const FcnParams& p) {
  Tensor hidden = relu(tape, add_broadcast_row(tape, matmul(tape, x, p.w1), p.b1));
  return add_broadcast_row(tape, matmul(tape, hidden, p.w2), p.b2);
}

/// Post-sublayer sequence LayerNorm(dropout(sub_out) + source). The residual
/// partner is the attended-over source, never the query.
inline Tensor sublayer_post(Tape& tape, const Tensor& sub_out, const Tensor& source,
                            const LayerNormParams& ln, double dropout_p, Mode mode, Rng& rng,
                            double eps = 1e-5) {
  if (sub_out.rows() != source.rows() || sub_out.cols() != source.cols())
    throw ShapeError("sublayer_post: sublayer output " + shape_str(sub_out.shape()) +
                     " vs source " + shape_str(source.shape()));
  Tensor dropped = dropout(tape, sub_out, dropout_p, mode, rng);
  return layer_norm_rows(tape, add(tape, dropped, source), ln.gain, ln.bias, eps);
}

} // namespace mia
