#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "mia/decoders.hpp"
#include "mia/mia.hpp"
#include "mia/params.hpp"
#include "mia/synth.hpp"

namespace mia {

struct TrainConfig {
  DecoderVariant variant = DecoderVariant::visual_attention;
  FeatureSource features = FeatureSource::original;
  MiaConfig mia;
  AdamConfig adam;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t max_len = 16;

  void validate() const {
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (max_len == 0) throw ConfigError("max_len must be at least 1");
    mia.validate();
  }

  nlohmann::json to_json() const {
    return {{"variant", variant_name(variant)},
            {"features", feature_source_name(features)},
            {"d_h", mia.d_h},
            {"heads", mia.heads},
            {"iters", mia.iterations},
            {"d_ff", mia.ff_width()},
            {"dropout", mia.dropout_p},
            {"ln_eps", mia.ln_eps},
            {"guiding", mia.guiding == GuidingOrder::concepts_first ? "concepts-first" : "visual-first"},
            {"self_attn_ablation", mia.attention == AttentionMode::self_ablation},
            {"anchor", mia.anchor},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"adam_eps", adam.eps},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"seed", seed},
            {"max_len", max_len}};
  }

  // Missing keys keep their current value, so a partial JSON object overlays defaults.
  void merge_json(const nlohmann::json& j) {
    try {
      if (j.contains("variant")) variant = parse_variant(j.at("variant").get<std::string>());
      if (j.contains("features")) features = parse_feature_source(j.at("features").get<std::string>());
      if (j.contains("d_h")) mia.d_h = j.at("d_h").get<std::size_t>();
      if (j.contains("heads")) mia.heads = j.at("heads").get<std::size_t>();
      if (j.contains("iters")) mia.iterations = j.at("iters").get<std::size_t>();
      if (j.contains("d_ff")) mia.d_ff = j.at("d_ff").get<std::size_t>();
      if (j.contains("dropout")) mia.dropout_p = j.at("dropout").get<double>();
      if (j.contains("ln_eps")) mia.ln_eps = j.at("ln_eps").get<double>();
      if (j.contains("guiding")) {
        const auto g = j.at("guiding").get<std::string>();
        if (g == "concepts-first") mia.guiding = GuidingOrder::concepts_first;
        else if (g == "visual-first") mia.guiding = GuidingOrder::visual_first;
        else throw ConfigError("unknown guiding order '" + g + "'");
      }
      if (j.contains("self_attn_ablation"))
        mia.attention = j.at("self_attn_ablation").get<bool>() ? AttentionMode::self_ablation : AttentionMode::mutual;
      if (j.contains("anchor")) mia.anchor = j.at("anchor").get<bool>();
      if (j.contains("lr")) adam.lr = j.at("lr").get<double>();
      if (j.contains("beta1")) adam.beta1 = j.at("beta1").get<double>();
      if (j.contains("beta2")) adam.beta2 = j.at("beta2").get<double>();
      if (j.contains("adam_eps")) adam.eps = j.at("adam_eps").get<double>();
      if (j.contains("epochs")) epochs = j.at("epochs").get<std::size_t>();
      if (j.contains("batch_size")) batch_size = j.at("batch_size").get<std::size_t>();
      if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("max_len")) max_len = j.at("max_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.merge_json(j);
    return c;
  }
};

/// Decoder plus (optionally) the MIA stack feeding it.
struct CaptionModel {
  TrainConfig config;
  Vocabulary vocab;
  DecoderModel decoder;
  std::optional<MiaParams> mia;

  static CaptionModel init(const TrainConfig& cfg, const Vocabulary& vocab, Rng& rng) {
    cfg.validate();
    CaptionModel m;
    m.config = cfg;
    m.vocab = vocab;
    m.decoder = DecoderModel::init(cfg.variant, vocab.size(), cfg.mia.d_h, rng);
    if (needs_mia(cfg.features)) m.mia = MiaParams::init(cfg.mia, rng);
    return m;
  }

  ParamList params() const {
    ParamList out = decoder.params();
    if (mia) {
      auto mp = mia->params();
      out.insert(out.end(), mp.begin(), mp.end());
    }
    return out;
  }
};

struct ForwardResult {
  Tensor loss; // summed over captions and tokens
  std::size_t tokens = 0;
  std::size_t correct = 0;
  std::optional<MiaResult> refined;
  DecoderFeatures features;
};

inline DecoderFeatures model_features(Tape& tape, const CaptionModel& m, const FeatureBundle& b, Mode mode, Rng& rng,
                                      std::optional<MiaResult>& refined) {
  if (b.width() != m.config.mia.d_h)
    throw ShapeError("bundle " + std::to_string(b.image_id) + " has feature width " + std::to_string(b.width()) +
                     ", model expects " + std::to_string(m.config.mia.d_h));
  if (m.mia) refined = mia_refine(tape, b.visual, b.concepts, *m.mia, m.config.mia, mode, rng);
  return integrate_mia(tape, m.config.features, b.visual, b.concepts, refined ? &*refined : nullptr);
}

/// Teacher-forced loss of every caption of one bundle.
inline ForwardResult forward(Tape& tape, const CaptionModel& m, const FeatureBundle& b, Mode mode, Rng& rng) {
  ForwardResult r;
  r.features = model_features(tape, m, b, mode, rng, r.refined);
  std::vector<Tensor> losses;
  for (const auto& caption : b.captions) {
    auto tf = teacher_forced_loss(tape, m.decoder, r.features, m.vocab.encode(caption));
    losses.push_back(tf.loss);
    r.tokens += tf.tokens;
    r.correct += tf.correct;
  }
  r.loss = losses.size() == 1 ? losses.front() : sum(tape, concat_cols(tape, losses));
  return r;
}

inline std::vector<std::size_t> caption_image(const CaptionModel& m, const FeatureBundle& b) {
  Tape tape;
  tape.set_recording(false);
  Rng unused(0);
  std::optional<MiaResult> refined;
  auto f = model_features(tape, m, b, Mode::eval, unused, refined);
  return greedy_decode(m.decoder, f, m.config.max_len);
}

} // namespace mia
