#include <gtest/gtest.h>

#include "mia/gradcheck.hpp"
#include "naive_reference.hpp"

using namespace mia;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// A model whose biases are nonzero so every term matters.
DecoderModel random_model(DecoderVariant v, std::size_t vocab, std::size_t d, Rng& rng) {
  auto m = DecoderModel::init(v, vocab, d, rng);
  for (auto& np : m.params())
    if (np.tensor.rank() == 1)
      for (auto& x : np.tensor.data()) x += rng.uniform(-0.3, 0.3);
  return m;
}

void expect_alpha_normalized(const Tensor& alpha) {
  double s = 0.0;
  for (double a : alpha.data()) s += a;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

} // namespace

TEST(Variants, NamesRoundTrip) {
  for (auto v : all_variants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("lstm"), ConfigError);
  EXPECT_EQ(parse_feature_source("mia"), FeatureSource::mia_fused);
  EXPECT_THROW(parse_feature_source("fused"), ConfigError);
}

TEST(AdditiveAttend, SingleFeature) {
  Rng rng(1);
  Tape tape;
  auto p = AdditiveAttentionParams::init(6, 6, rng);
  Tensor f = random_matrix(1, 6, rng);
  auto r = additive_attend(tape, random_matrix(1, 6, rng), f, p);
  EXPECT_EQ(r.alpha.values(), std::vector<double>{1.0});
  EXPECT_LE(max_abs_diff(r.context, f), 1e-15);
}

TEST(AdditiveAttend, DuplicatedRowsGetUniformWeight) {
  Rng rng(2);
  Tape tape;
  auto p = AdditiveAttentionParams::init(6, 6, rng);
  Tensor row = random_matrix(1, 6, rng);
  Tensor f({4, 6});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) f.at(i, j) = row.at(0, j);
  auto r = additive_attend(tape, random_matrix(1, 6, rng), f, p);
  for (double a : r.alpha.data()) EXPECT_NEAR(a, 0.25, 1e-15);
  EXPECT_LE(max_abs_diff(r.context, row), 1e-15);
}

TEST(AdditiveAttend, MatchesNaive) {
  Rng rng(3);
  Tape tape;
  auto p = AdditiveAttentionParams::init(6, 5, rng);
  Tensor h = random_matrix(1, 6, rng), f = random_matrix(3, 6, rng);
  auto r = additive_attend(tape, h, f, p);
  const auto e = naive::additive_attend(naive::to_vec(h), naive::to_mat(f), p);
  EXPECT_LE(naive::max_diff(e.alpha, r.alpha), 1e-12);
  EXPECT_LE(naive::max_diff(e.context, r.context), 1e-12);
  EXPECT_THROW(additive_attend(tape, random_matrix(1, 4, rng), f, p), ShapeError);
}

TEST(Lstm, MatchesNaiveAndForgetBiasIsOne) {
  Rng rng(4);
  auto p = LstmParams::init(5, 4, rng);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(p.b[j], (j >= 4 && j < 8) ? 1.0 : 0.0);
  for (auto& v : p.b.data()) v += rng.uniform(-0.2, 0.2);
  LstmState s{random_matrix(1, 4, rng), random_matrix(1, 4, rng)};
  Tensor x = random_matrix(1, 5, rng);
  Tape tape;
  auto r = lstm_step(tape, p, s, x);
  const auto e = naive::lstm(p, {naive::to_vec(s.h), naive::to_vec(s.c)}, naive::to_vec(x));
  EXPECT_LE(naive::max_diff(e.h, r.h), 1e-12);
  EXPECT_LE(naive::max_diff(e.c, r.c), 1e-12);
}

class EveryVariant : public ::testing::TestWithParam<DecoderVariant> {};

TEST_P(EveryVariant, ThreeStepRolloutMatchesNaive) {
  Rng rng(5);
  const std::size_t V = 9, d = 6;
  auto m = random_model(GetParam(), V, d, rng);
  Tensor vis = random_matrix(4, d, rng), con = random_matrix(4, d, rng);
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, vis, con);
  auto state = DecoderState::initial(m);
  auto ns = naive::initial(d);
  const auto nv = naive::to_mat(vis), nc = naive::to_mat(con);
  for (std::size_t tok : {std::size_t{Vocabulary::bos}, std::size_t{5}, std::size_t{7}}) {
    auto step = decoder_step(tape, m, state, tok, f);
    const auto expect = naive::decoder_step(m, ns, tok, nv, nc);
    EXPECT_LE(naive::max_diff(expect, step.logits), 1e-10);
    EXPECT_EQ(step.logits.shape(), (Shape{1, V}));
    EXPECT_TRUE(step.logits.all_finite());
    if (uses_attention(GetParam())) expect_alpha_normalized(step.alpha);
    state = step.state;
  }
}

TEST_P(EveryVariant, DegenerateInputsGiveFiniteDeterministicLogits) {
  Rng rng(6);
  auto m = DecoderModel::init(GetParam(), 7, 4, rng);
  m.embedding = Tensor({7, 4});
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, Tensor({3, 4}), Tensor({3, 4}));
  auto a = decoder_step(tape, m, DecoderState::initial(m), 2, f);
  auto b = decoder_step(tape, m, DecoderState::initial(m), 2, f);
  EXPECT_TRUE(a.logits.all_finite());
  EXPECT_EQ(a.logits.values(), b.logits.values());
}

TEST_P(EveryVariant, FiniteLogitsOnLargeInputs) {
  Rng rng(7);
  auto m = DecoderModel::init(GetParam(), 7, 4, rng);
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, random_matrix(5, 4, rng, -50, 50), random_matrix(5, 4, rng, -50, 50));
  auto s = DecoderState::initial(m);
  for (int t = 0; t < 4; ++t) {
    auto r = decoder_step(tape, m, s, 4, f);
    EXPECT_TRUE(r.logits.all_finite());
    s = r.state;
  }
}

TEST_P(EveryVariant, TeacherForcedLossDecreasesForFiftySteps) {
  Rng rng(8);
  const std::size_t V = 10, d = 8;
  auto m = DecoderModel::init(GetParam(), V, d, rng);
  Tensor vis = random_matrix(5, d, rng), con = random_matrix(5, d, rng);
  const std::vector<std::size_t> caption{4, 6, 5, 9, 4, 7};
  auto ps = m.params();
  AdamState st;
  double prev = 1e300;
  for (int step = 0; step < 50; ++step) {
    zero_grads(ps);
    Tape tape;
    auto f = DecoderFeatures::prepare(tape, vis, con);
    auto r = teacher_forced_loss(tape, m, f, caption);
    const double loss = r.loss.item();
    EXPECT_LT(loss, prev) << "step " << step;
    prev = loss;
    tape.backward(r.loss);
    adam_step(ps, st, {1e-3, 0.9, 0.999, 1e-8});
  }
}

TEST_P(EveryVariant, GreedyDecodeRespectsLimits) {
  Rng rng(9);
  auto m = DecoderModel::init(GetParam(), 8, 4, rng);
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, random_matrix(3, 4, rng), random_matrix(3, 4, rng));
  EXPECT_LE(greedy_decode(m, f, 1).size(), 1u);
  EXPECT_EQ(greedy_decode(m, f, 6), greedy_decode(m, f, 6));
  EXPECT_THROW(greedy_decode(m, f, 0), ContractError);
}

INSTANTIATE_TEST_SUITE_P(Decoders, EveryVariant, ::testing::ValuesIn(all_variants),
                         [](const auto& info) {
                           std::string n(variant_name(info.param));
                           for (auto& c : n)
                             if (c == '-') c = '_';
                           return n;
                         });

TEST(Steps, WrongVariantIsContractError) {
  Rng rng(10);
  auto m = DecoderModel::init(DecoderVariant::visual_condition, 6, 4, rng);
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, Tensor({2, 4}), Tensor({2, 4}));
  EXPECT_THROW(step_visual_attention(tape, m, DecoderState::initial(m), 1, f), ContractError);
}

TEST(Steps, SingleRegionContextIsThatRegion) {
  Rng rng(11);
  for (auto v : {DecoderVariant::visual_attention, DecoderVariant::visual_regional_attention}) {
    auto m = DecoderModel::init(v, 6, 4, rng);
    Tensor region = random_matrix(1, 4, rng);
    Tape tape;
    auto f = DecoderFeatures::prepare(tape, region, random_matrix(3, 4, rng));
    auto s = DecoderState::initial(m);
    for (int t = 0; t < 3; ++t) {
      auto r = decoder_step(tape, m, s, 4, f);
      EXPECT_EQ(r.alpha.values(), std::vector<double>{1.0});
      s = r.state;
    }
  }
}

TEST(Steps, ConditionVariantsAgreeAtFirstStepOnEqualMeans) {
  Rng rng(12);
  auto vc = DecoderModel::init(DecoderVariant::visual_condition, 6, 4, rng);
  auto cc = vc;
  cc.variant = DecoderVariant::concept_condition;
  Tensor feats = random_matrix(3, 4, rng);
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, feats, feats);
  auto a = decoder_step(tape, vc, DecoderState::initial(vc), Vocabulary::bos, f);
  auto b = decoder_step(tape, cc, DecoderState::initial(cc), Vocabulary::bos, f);
  EXPECT_EQ(a.state.first.h.values(), b.state.first.h.values());
}

TEST(Steps, ZeroMeansGiveALanguageModelStep) {
  Rng rng(13);
  auto m = DecoderModel::init(DecoderVariant::visual_condition, 6, 4, rng);
  Tape tape;
  auto zero = DecoderFeatures::prepare(tape, Tensor({2, 4}), Tensor({2, 4}));
  auto s1 = decoder_step(tape, m, DecoderState::initial(m), Vocabulary::bos, zero).state;
  auto r = decoder_step(tape, m, s1, 5, zero);
  // Same step computed from the word embedding alone.
  auto h = lstm_step(tape, m.lstm, s1.first, embedding_lookup(tape, m.embedding, 5));
  EXPECT_LE(max_abs_diff(r.logits, matmul(tape, h.h, m.w_out)), 1e-15);
}

TEST(Greedy, EosAtFirstStepGivesEmptyCaption) {
  Rng rng(14);
  auto m = DecoderModel::init(DecoderVariant::concept_condition, 6, 4, rng);
  Tape tape;
  auto f = DecoderFeatures::prepare(tape, random_matrix(2, 4, rng), random_matrix(2, 4, rng));
  auto first = decoder_step(tape, m, DecoderState::initial(m), Vocabulary::bos, f);
  // Point the EOS column along h_1 and zero the rest: EOS wins at step 1.
  m.w_out = Tensor({4, 6});
  for (std::size_t k = 0; k < 4; ++k) m.w_out.at(k, Vocabulary::eos) = first.state.first.h[k];
  EXPECT_TRUE(greedy_decode(m, f, 10).empty());
}

TEST(IntegrateMia, FeatureSources) {
  Rng rng(15);
  MiaConfig cfg;
  cfg.d_h = 8;
  cfg.heads = 2;
  auto p = MiaParams::init(cfg, rng);
  Tensor vis = random_matrix(5, 8, rng), con = random_matrix(5, 8, rng);
  Tape tape;
  auto refined = mia_refine(tape, vis, con, p, cfg, Mode::eval, rng);

  auto orig = integrate_mia(tape, FeatureSource::original, vis, con, nullptr);
  EXPECT_TRUE(orig.visual.same_storage(vis));
  EXPECT_TRUE(orig.concepts.same_storage(con));

  auto fused = integrate_mia(tape, FeatureSource::mia_fused, vis, con, &refined);
  EXPECT_TRUE(fused.visual.same_storage(refined.fused));
  EXPECT_TRUE(fused.concepts.same_storage(refined.fused));
  EXPECT_EQ(fused.visual.rows(), 5u);

  auto only_vis = integrate_mia(tape, FeatureSource::mia_visual, vis, con, &refined);
  EXPECT_TRUE(only_vis.visual.same_storage(refined.visual));
  EXPECT_TRUE(only_vis.concepts.same_storage(con));

  auto only_txt = integrate_mia(tape, FeatureSource::mia_textual, vis, con, &refined);
  EXPECT_TRUE(only_txt.visual.same_storage(vis));
  EXPECT_TRUE(only_txt.concepts.same_storage(refined.textual));

  EXPECT_THROW(integrate_mia(tape, FeatureSource::mia_fused, vis, con, nullptr), ContractError);
}
