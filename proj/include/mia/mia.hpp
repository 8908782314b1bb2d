#pragma once

#include <string>
#include <vector>

#include "mia/attention.hpp"

namespace mia {

enum class GuidingOrder { concepts_first, visual_first };
enum class AttentionMode { mutual, self_ablation };

struct MiaConfig {
  std::size_t d_h = 16;
  std::size_t heads = 8;
  std::size_t iterations = 2;
  std::size_t d_ff = 0; // 0 selects 4 * d_h
  double dropout_p = 0.1;
  double ln_eps = 1e-5;
  GuidingOrder guiding = GuidingOrder::concepts_first;
  AttentionMode attention = AttentionMode::mutual;
  bool anchor = true;
  bool per_head_traces = false;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_h; }

  void validate() const {
    if (d_h < 2) throw ConfigError("feature width must be at least 2");
    if (heads == 0 || d_h % heads != 0)
      throw ConfigError("head count " + std::to_string(heads) + " must divide feature width " +
                        std::to_string(d_h));
    if (iterations == 0) throw ConfigError("iteration count must be at least 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  }
};

// Weights of one modality's stack: attention sublayer then FCN sublayer.
struct BranchParams {
  MultiHeadParams attention;
  FcnParams fcn;
  LayerNormParams attention_norm;
  LayerNormParams fcn_norm;

  static BranchParams init(const MiaConfig& cfg, Rng& rng) {
    BranchParams b;
    b.attention = MultiHeadParams::init(cfg.d_h, cfg.heads, rng);
    b.fcn = FcnParams::init(cfg.d_h, cfg.ff_width(), rng);
    b.attention_norm = LayerNormParams::init(cfg.d_h);
    b.fcn_norm = LayerNormParams::init(cfg.d_h);
    return b;
  }

  void append_to(ParamList& out, const std::string& prefix) const {
    attention.append_to(out, prefix + ".attention");
    attention_norm.append_to(out, prefix + ".attention_norm");
    fcn.append_to(out, prefix + ".fcn");
    fcn_norm.append_to(out, prefix + ".fcn_norm");
  }
};

/// The single parameter set shared by every iteration.
struct MiaParams {
  BranchParams visual;
  BranchParams textual;
  LayerNormParams visual_anchor;
  LayerNormParams textual_anchor;
  LayerNormParams fuse;

  static MiaParams init(const MiaConfig& cfg, Rng& rng) {
    cfg.validate();
    MiaParams p;
    p.visual = BranchParams::init(cfg, rng);
    p.textual = BranchParams::init(cfg, rng);
    p.visual_anchor = LayerNormParams::init(cfg.d_h);
    p.textual_anchor = LayerNormParams::init(cfg.d_h);
    p.fuse = LayerNormParams::init(cfg.d_h);
    return p;
  }

  ParamList params(const std::string& prefix = "mia") const {
    ParamList out;
    visual.append_to(out, prefix + ".visual");
    textual.append_to(out, prefix + ".textual");
    visual_anchor.append_to(out, prefix + ".visual_anchor");
    textual_anchor.append_to(out, prefix + ".textual_anchor");
    fuse.append_to(out, prefix + ".fuse");
    return out;
  }
};

struct RoundTrace {
  Tensor visual;  // head-averaged weights of the pass that produces I_t
  Tensor textual; // head-averaged weights of the pass that produces T_t
  std::vector<Tensor> visual_heads;
  std::vector<Tensor> textual_heads;
};

struct AttentionTrace {
  std::vector<RoundTrace> rounds;
};

struct AccumulatedTrace {
  std::vector<Tensor> visual;
  std::vector<Tensor> textual;
};

namespace detail {

struct BranchOutput {
  Tensor features;
  MultiHeadResult attention;
};

inline BranchOutput run_branch(Tape& tape, const Tensor& query, const Tensor& source,
                               const BranchParams& p, const MiaConfig& cfg, Mode mode, Rng& rng) {
  auto att = multi_head(tape, query, source, p.attention);
  Tensor mid = sublayer_post(tape, att.out, source, p.attention_norm, cfg.dropout_p, mode, rng, cfg.ln_eps);
  // The FCN sublayer's source is its own input.
  Tensor out = sublayer_post(tape, fcn(tape, mid, p.fcn), mid, p.fcn_norm, cfg.dropout_p, mode, rng,
                             cfg.ln_eps);
  return {out, std::move(att)};
}

} // namespace detail

struct RoundResult {
  Tensor visual;
  Tensor textual;
  RoundTrace trace;
};

/// One round of mutual attention. With concepts_first the visual features are
/// integrated under textual queries, then the textual concepts under the
/// refined visual queries; visual_first swaps which branch runs first.
inline RoundResult mutual_round(Tape& tape, const Tensor& visual_prev, const Tensor& textual_prev,
                                const MiaParams& p, const MiaConfig& cfg, Mode mode, Rng& rng) {
  if (visual_prev.rows() != textual_prev.rows())
    throw AlignmentError("visual features have " + std::to_string(visual_prev.rows()) +
                         " rows but textual concepts have " + std::to_string(textual_prev.rows()));
  if (visual_prev.cols() != cfg.d_h || textual_prev.cols() != cfg.d_h)
    throw ShapeError("mutual_round: feature width must be " + std::to_string(cfg.d_h) + ", got " +
                     shape_str(visual_prev.shape()) + " and " + shape_str(textual_prev.shape()));

  detail::BranchOutput vis, txt;
  if (cfg.attention == AttentionMode::self_ablation) {
    vis = detail::run_branch(tape, visual_prev, visual_prev, p.visual, cfg, mode, rng);
    txt = detail::run_branch(tape, textual_prev, textual_prev, p.textual, cfg, mode, rng);
  } else if (cfg.guiding == GuidingOrder::concepts_first) {
    vis = detail::run_branch(tape, textual_prev, visual_prev, p.visual, cfg, mode, rng);
    txt = detail::run_branch(tape, vis.features, textual_prev, p.textual, cfg, mode, rng);
  } else {
    txt = detail::run_branch(tape, visual_prev, textual_prev, p.textual, cfg, mode, rng);
    vis = detail::run_branch(tape, txt.features, visual_prev, p.visual, cfg, mode, rng);
  }

  RoundTrace trace{vis.attention.mean_weights(), txt.attention.mean_weights(), {}, {}};
  if (cfg.per_head_traces) {
    trace.visual_heads = vis.attention.weights;
    trace.textual_heads = txt.attention.weights;
  }
  return {vis.features, txt.features, std::move(trace)};
}

struct MiaResult {
  Tensor visual;  // I_N
  Tensor textual; // T_N
  Tensor fused;   // LayerNorm(I_N + T_N)
  AttentionTrace trace;
};

/// Runs `cfg.iterations` mutual rounds with the same parameters. When the
/// anchor is on, each branch output becomes LayerNorm(dropout(out) + layer input).
inline MiaResult mia_refine(Tape& tape, const Tensor& visual0, const Tensor& textual0, const MiaParams& p,
                            const MiaConfig& cfg, Mode mode, Rng& rng) {
  cfg.validate();
  Tensor vis = visual0, txt = textual0;
  AttentionTrace trace;
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    auto round = mutual_round(tape, vis, txt, p, cfg, mode, rng);
    if (cfg.anchor) {
      Tensor v_next = sublayer_post(tape, round.visual, vis, p.visual_anchor, cfg.dropout_p, mode, rng, cfg.ln_eps);
      Tensor t_next = sublayer_post(tape, round.textual, txt, p.textual_anchor, cfg.dropout_p, mode, rng, cfg.ln_eps);
      vis = v_next;
      txt = t_next;
    } else {
      vis = round.visual;
      txt = round.textual;
    }
    trace.rounds.push_back(std::move(round.trace));
  }
  Tensor fused = layer_norm_rows(tape, add(tape, vis, txt), p.fuse.gain, p.fuse.bias, cfg.ln_eps);
  return {vis, txt, fused, std::move(trace)};
}

/// Composes per-iteration maps back onto the original feature indices:
/// acc_t = A_t * acc_{t-1}, acc_0 = identity.
inline AccumulatedTrace accumulate_trace(const AttentionTrace& trace) {
  AccumulatedTrace acc;
  Tape scratch;
  scratch.set_recording(false);
  for (const auto& r : trace.rounds) {
    acc.visual.push_back(acc.visual.empty() ? r.visual.clone() : matmul(scratch, r.visual, acc.visual.back()));
    acc.textual.push_back(acc.textual.empty() ? r.textual.clone()
                                              : matmul(scratch, r.textual, acc.textual.back()));
  }
  return acc;
}

} // namespace mia
