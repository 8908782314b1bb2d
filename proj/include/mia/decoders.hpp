#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mia/mia.hpp"
#include "mia/vocab.hpp"

namespace mia {

enum class DecoderVariant {
  visual_attention,
  concept_attention,
  visual_condition,
  concept_condition,
  visual_regional_attention,
};

inline constexpr DecoderVariant all_variants[] = {
    DecoderVariant::visual_attention, DecoderVariant::concept_attention, DecoderVariant::visual_condition,
    DecoderVariant::concept_condition, DecoderVariant::visual_regional_attention};

inline std::string_view variant_name(DecoderVariant v) {
  switch (v) {
  case DecoderVariant::visual_attention: return "visual-attn";
  case DecoderVariant::concept_attention: return "concept-attn";
  case DecoderVariant::visual_condition: return "visual-cond";
  case DecoderVariant::concept_condition: return "concept-cond";
  case DecoderVariant::visual_regional_attention: return "regional-attn";
  }
  return "?";
}

inline DecoderVariant parse_variant(std::string_view s) {
  for (auto v : all_variants)
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown decoder variant '" + std::string(s) + "'");
}

inline bool uses_attention(DecoderVariant v) {
  return v == DecoderVariant::visual_attention || v == DecoderVariant::concept_attention ||
         v == DecoderVariant::visual_regional_attention;
}

// Which image representation reaches the decoder.
enum class FeatureSource { original, mia_fused, mia_visual, mia_textual };

inline std::string_view feature_source_name(FeatureSource f) {
  switch (f) {
  case FeatureSource::original: return "original";
  case FeatureSource::mia_fused: return "mia";
  case FeatureSource::mia_visual: return "mia-visual";
  case FeatureSource::mia_textual: return "mia-textual";
  }
  return "?";
}

inline FeatureSource parse_feature_source(std::string_view s) {
  for (auto f : {FeatureSource::original, FeatureSource::mia_fused, FeatureSource::mia_visual,
                 FeatureSource::mia_textual})
    if (feature_source_name(f) == s) return f;
  throw ConfigError("unknown feature source '" + std::string(s) + "'");
}

inline bool needs_mia(FeatureSource f) { return f != FeatureSource::original; }

// Gates packed as [input | forget | cell | output] along the columns.
struct LstmParams {
  Tensor wx; // in x 4d
  Tensor wh; // d x 4d
  Tensor b;  // 4d

  static LstmParams init(std::size_t in, std::size_t d, Rng& rng) {
    LstmParams p{glorot(in, 4 * d, rng), glorot(d, 4 * d, rng), param_vector(4 * d, 0.0)};
    for (std::size_t j = d; j < 2 * d; ++j) p.b[j] = 1.0;
    return p;
  }

  std::size_t width() const { return wh.rows(); }

  void append_to(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".wx", wx});
    out.push_back({prefix + ".wh", wh});
    out.push_back({prefix + ".b", b});
  }
};

struct LstmState {
  Tensor h, c; // 1 x d each

  static LstmState zeros(std::size_t d) { return {Tensor::zeros(1, d), Tensor::zeros(1, d)}; }
};

inline LstmState lstm_step(Tape& tape, const LstmParams& p, const LstmState& s, const Tensor& x) {
  const std::size_t d = p.width();
  Tensor gates = add_broadcast_row(tape, add(tape, matmul(tape, x, p.wx), matmul(tape, s.h, p.wh)), p.b);
  Tensor i = sigmoid(tape, slice_cols(tape, gates, 0, d));
  Tensor f = sigmoid(tape, slice_cols(tape, gates, d, d));
  Tensor g = tanh(tape, slice_cols(tape, gates, 2 * d, d));
  Tensor o = sigmoid(tape, slice_cols(tape, gates, 3 * d, d));
  Tensor c = add(tape, mul(tape, f, s.c), mul(tape, i, g));
  return {mul(tape, o, tanh(tape, c)), c};
}

// w_alpha tanh(W_F F^T (+) W_h h), stored transposed for row-major features.
struct AdditiveAttentionParams {
  Tensor w_feat;   // d x a
  Tensor w_hidden; // d x a
  Tensor w_alpha;  // a x 1

  static AdditiveAttentionParams init(std::size_t d, std::size_t a, Rng& rng) {
    return {glorot(d, a, rng), glorot(d, a, rng), glorot(a, 1, rng)};
  }

  void append_to(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_feat", w_feat});
    out.push_back({prefix + ".w_hidden", w_hidden});
    out.push_back({prefix + ".w_alpha", w_alpha});
  }
};

struct AttendResult {
  Tensor context; // 1 x d
  Tensor alpha;   // 1 x L
};

/// alpha = softmax(w_alpha tanh(W_F F^T (+) W_h h)), context = alpha F, where
/// (+) adds the projected hidden vector to every column.
inline AttendResult additive_attend(Tape& tape, const Tensor& h, const Tensor& features,
                                    const AdditiveAttentionParams& p) {
  if (h.cols() != p.w_hidden.rows() || features.cols() != p.w_feat.rows())
    throw ShapeError("additive_attend: hidden " + shape_str(h.shape()) + " / features " +
                     shape_str(features.shape()) + " do not match projection widths");
  Tensor pre = add_broadcast_row(tape, matmul(tape, features, p.w_feat), matmul(tape, h, p.w_hidden));
  Tensor scores = transpose(tape, matmul(tape, tanh(tape, pre), p.w_alpha)); // 1 x L
  Tensor alpha = softmax_rows(tape, scores);
  return {matmul(tape, alpha, features), alpha};
}

/// One of the five baseline captioners.
struct DecoderModel {
  DecoderVariant variant = DecoderVariant::visual_attention;
  std::size_t d_h = 0;
  Tensor embedding; // V x d
  LstmParams lstm;
  std::optional<LstmParams> lstm2; // regional variant only
  std::optional<AdditiveAttentionParams> attention;
  Tensor w_out; // d x V
  Tensor b_out; // V

  std::size_t vocab_size() const { return embedding.rows(); }

  static DecoderModel init(DecoderVariant variant, std::size_t vocab_size, std::size_t d, Rng& rng) {
    DecoderModel m;
    m.variant = variant;
    m.d_h = d;
    m.embedding = Tensor({vocab_size, d}, 0.0, true);
    for (auto& v : m.embedding.data()) v = rng.normal(0.0, 1.0);
    if (variant == DecoderVariant::visual_regional_attention) {
      m.lstm = LstmParams::init(2 * d, d, rng);
      m.lstm2 = LstmParams::init(2 * d, d, rng);
    } else {
      m.lstm = LstmParams::init(d, d, rng);
    }
    if (uses_attention(variant)) m.attention = AdditiveAttentionParams::init(d, d, rng);
    m.w_out = glorot(d, vocab_size, rng);
    m.b_out = param_vector(vocab_size, 0.0);
    return m;
  }

  ParamList params(const std::string& prefix = "decoder") const {
    ParamList out;
    out.push_back({prefix + ".embedding", embedding});
    lstm.append_to(out, prefix + ".lstm");
    if (lstm2) lstm2->append_to(out, prefix + ".lstm2");
    if (attention) attention->append_to(out, prefix + ".attention");
    out.push_back({prefix + ".w_out", w_out});
    out.push_back({prefix + ".b_out", b_out});
    return out;
  }
};

// Attention sources and their row averages, computed once per caption.
struct DecoderFeatures {
  Tensor visual;        // L_I x d
  Tensor concepts;      // L_T x d
  Tensor visual_mean;   // I_a
  Tensor concept_mean;  // T_a

  static DecoderFeatures prepare(Tape& tape, const Tensor& visual, const Tensor& concepts) {
    return {visual, concepts, mean_rows(tape, visual), mean_rows(tape, concepts)};
  }
};

/// Maps the loaded features and MIA outputs onto the decoder's inputs.
inline DecoderFeatures integrate_mia(Tape& tape, FeatureSource source, const Tensor& visual,
                                     const Tensor& concepts, const MiaResult* refined) {
  if (needs_mia(source) && refined == nullptr)
    throw ContractError("feature source '" + std::string(feature_source_name(source)) +
                        "' needs MIA outputs");
  switch (source) {
  case FeatureSource::original: return DecoderFeatures::prepare(tape, visual, concepts);
  case FeatureSource::mia_fused: {
    // Both roles read the same fused matrix; share one average.
    Tensor mean = mean_rows(tape, refined->fused);
    return {refined->fused, refined->fused, mean, mean};
  }
  case FeatureSource::mia_visual: return DecoderFeatures::prepare(tape, refined->visual, concepts);
  case FeatureSource::mia_textual: return DecoderFeatures::prepare(tape, visual, refined->textual);
  }
  throw ContractError("unhandled feature source");
}

struct DecoderState {
  LstmState first;
  LstmState second;
  std::size_t step = 0; // completed steps; 0 means the next step is t = 1

  static DecoderState initial(const DecoderModel& m) {
    return {LstmState::zeros(m.d_h), LstmState::zeros(m.d_h), 0};
  }
};

struct StepResult {
  DecoderState state;
  Tensor logits; // 1 x V
  Tensor alpha;  // 1 x L for attention variants, undefined otherwise
};

namespace detail {

inline void expect_variant(const DecoderModel& m, DecoderVariant v) {
  if (m.variant != v)
    throw ContractError("decoder step for '" + std::string(variant_name(v)) + "' called on a '" +
                        std::string(variant_name(m.variant)) + "' model");
}

// Input to the single-LSTM variants: `first` at t = 1, word + `later` afterwards.
inline Tensor conditioned_input(Tape& tape, const DecoderModel& m, const DecoderState& s, std::size_t prev_token,
                                const Tensor& first, const Tensor& later) {
  if (s.step == 0) return first;
  return add(tape, embedding_lookup(tape, m.embedding, prev_token), later);
}

inline Tensor output_logits(Tape& tape, const DecoderModel& m, const Tensor& h) {
  return add_broadcast_row(tape, matmul(tape, h, m.w_out), m.b_out);
}

} // namespace detail

inline StepResult step_visual_attention(Tape& tape, const DecoderModel& m, const DecoderState& s,
                                        std::size_t prev_token, const DecoderFeatures& f) {
  detail::expect_variant(m, DecoderVariant::visual_attention);
  Tensor x = add(tape, embedding_lookup(tape, m.embedding, prev_token), f.visual_mean);
  LstmState h = lstm_step(tape, m.lstm, s.first, x);
  auto att = additive_attend(tape, h.h, f.visual, *m.attention);
  Tensor logits = detail::output_logits(tape, m, add(tape, h.h, att.context));
  return {{h, s.second, s.step + 1}, logits, att.alpha};
}

inline StepResult step_concept_attention(Tape& tape, const DecoderModel& m, const DecoderState& s,
                                         std::size_t prev_token, const DecoderFeatures& f) {
  detail::expect_variant(m, DecoderVariant::concept_attention);
  Tensor x = detail::conditioned_input(tape, m, s, prev_token, f.visual_mean, f.concept_mean);
  LstmState h = lstm_step(tape, m.lstm, s.first, x);
  auto att = additive_attend(tape, h.h, f.concepts, *m.attention);
  Tensor logits = detail::output_logits(tape, m, add(tape, h.h, att.context));
  return {{h, s.second, s.step + 1}, logits, att.alpha};
}

inline StepResult step_visual_condition(Tape& tape, const DecoderModel& m, const DecoderState& s,
                                        std::size_t prev_token, const DecoderFeatures& f) {
  detail::expect_variant(m, DecoderVariant::visual_condition);
  Tensor x = detail::conditioned_input(tape, m, s, prev_token, f.concept_mean, f.visual_mean);
  LstmState h = lstm_step(tape, m.lstm, s.first, x);
  return {{h, s.second, s.step + 1}, detail::output_logits(tape, m, h.h), {}};
}

inline StepResult step_concept_condition(Tape& tape, const DecoderModel& m, const DecoderState& s,
                                         std::size_t prev_token, const DecoderFeatures& f) {
  detail::expect_variant(m, DecoderVariant::concept_condition);
  Tensor x = detail::conditioned_input(tape, m, s, prev_token, f.visual_mean, f.concept_mean);
  LstmState h = lstm_step(tape, m.lstm, s.first, x);
  return {{h, s.second, s.step + 1}, detail::output_logits(tape, m, h.h), {}};
}

inline StepResult step_visual_regional(Tape& tape, const DecoderModel& m, const DecoderState& s,
                                       std::size_t prev_token, const DecoderFeatures& f) {
  detail::expect_variant(m, DecoderVariant::visual_regional_attention);
  Tensor x1 = concat_cols(tape, {embedding_lookup(tape, m.embedding, prev_token), f.visual_mean});
  LstmState h1 = lstm_step(tape, m.lstm, s.first, x1);
  auto att = additive_attend(tape, h1.h, f.visual, *m.attention);
  LstmState h2 = lstm_step(tape, *m.lstm2, s.second, concat_cols(tape, {h1.h, att.context}));
  return {{h1, h2, s.step + 1}, detail::output_logits(tape, m, h2.h), att.alpha};
}

inline StepResult decoder_step(Tape& tape, const DecoderModel& m, const DecoderState& s, std::size_t prev_token,
                               const DecoderFeatures& f) {
  switch (m.variant) {
  case DecoderVariant::visual_attention: return step_visual_attention(tape, m, s, prev_token, f);
  case DecoderVariant::concept_attention: return step_concept_attention(tape, m, s, prev_token, f);
  case DecoderVariant::visual_condition: return step_visual_condition(tape, m, s, prev_token, f);
  case DecoderVariant::concept_condition: return step_concept_condition(tape, m, s, prev_token, f);
  case DecoderVariant::visual_regional_attention: return step_visual_regional(tape, m, s, prev_token, f);
  }
  throw ContractError("unhandled decoder variant");
}

inline std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.numel(); ++j)
    if (logits[j] > logits[best]) best = j;
  return best;
}

struct TeacherForcedResult {
  Tensor loss;           // summed cross-entropy, 1 x 1
  std::size_t tokens = 0;
  std::size_t correct = 0; // argmax hits
};

/// Feeds BOS + caption and scores caption + EOS.
inline TeacherForcedResult teacher_forced_loss(Tape& tape, const DecoderModel& m, const DecoderFeatures& f,
                                               const std::vector<std::size_t>& caption) {
  std::vector<std::size_t> inputs{Vocabulary::bos};
  inputs.insert(inputs.end(), caption.begin(), caption.end());
  std::vector<std::size_t> targets(caption.begin(), caption.end());
  targets.push_back(Vocabulary::eos);

  TeacherForcedResult r;
  DecoderState s = DecoderState::initial(m);
  std::vector<Tensor> losses;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto step = decoder_step(tape, m, s, inputs[t], f);
    losses.push_back(cross_entropy(tape, step.logits, targets[t]));
    r.correct += argmax(step.logits) == targets[t] ? 1 : 0;
    s = std::move(step.state);
  }
  r.tokens = targets.size();
  r.loss = losses.size() == 1 ? losses.front() : sum(tape, concat_cols(tape, losses));
  return r;
}

/// Argmax decoding from BOS until EOS or `max_len` tokens. EOS is not returned.
inline std::vector<std::size_t> greedy_decode(const DecoderModel& m, const DecoderFeatures& f, std::size_t max_len) {
  if (max_len == 0) throw ContractError("greedy_decode: max_len must be at least 1");
  Tape tape;
  tape.set_recording(false);
  std::vector<std::size_t> out;
  DecoderState s = DecoderState::initial(m);
  std::size_t prev = Vocabulary::bos;
  for (std::size_t t = 0; t < max_len; ++t) {
    auto step = decoder_step(tape, m, s, prev, f);
    prev = argmax(step.logits);
    if (prev == Vocabulary::eos) break;
    out.push_back(prev);
    s = std::move(step.state);
  }
  return out;
}

} // namespace mia
