#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "mia/gradcheck.hpp"
#include "naive_reference.hpp"

using namespace mia;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(perm[i], j);
  return out;
}

std::vector<std::size_t> random_perm(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

HeadParams random_head(std::size_t d_h, std::size_t d_k, Rng& rng) {
  return {random_matrix(d_h, d_k, rng), random_matrix(d_h, d_k, rng), random_matrix(d_h, d_k, rng)};
}

} // namespace

TEST(AttendHead, SingleSourceGetsAllWeight) {
  Rng rng(1);
  Tape tape;
  HeadParams h = random_head(4, 2, rng);
  Tensor q = random_matrix(3, 4, rng), s = random_matrix(1, 4, rng);
  auto r = attend_head(tape, q, s, h);
  Tensor sv = matmul(tape, s, h.wv);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.weights.at(i, 0), 1.0);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(r.out.at(i, c), sv.at(0, c), 1e-15);
  }
}

TEST(AttendHead, ZeroQueryKeyWeightsGiveUniformAttention) {
  Rng rng(2);
  Tape tape;
  HeadParams h = random_head(4, 2, rng);
  h.wq = Tensor({4, 2});
  h.wk = Tensor({4, 2});
  Tensor s = random_matrix(5, 4, rng);
  auto r = attend_head(tape, s, s, h);
  for (double w : r.weights.data()) EXPECT_NEAR(w, 0.2, 1e-15);
}

TEST(AttendHead, MatchesNaiveLoops) {
  Rng rng(3);
  Tape tape;
  HeadParams h = random_head(6, 3, rng);
  Tensor q = random_matrix(2, 6, rng), s = random_matrix(3, 6, rng);
  auto r = attend_head(tape, q, s, h);
  naive::Mat w;
  const auto out = naive::attend_head(naive::to_mat(q), naive::to_mat(s), naive::to_mat(h.wq),
                                      naive::to_mat(h.wk), naive::to_mat(h.wv), &w);
  EXPECT_LE(naive::max_diff(out, r.out), 1e-12);
  EXPECT_LE(naive::max_diff(w, r.weights), 1e-12);
}

TEST(AttendHead, WidthMismatchIsShapeError) {
  Rng rng(4);
  Tape tape;
  EXPECT_THROW(attend_head(tape, Tensor({2, 4}), Tensor({2, 5}), random_head(4, 2, rng)), ShapeError);
}

TEST(AttendHead, RowsSumToOne) {
  Rng rng(5);
  Tape tape;
  for (int trial = 0; trial < 30; ++trial) {
    HeadParams h = random_head(8, 4, rng);
    auto r = attend_head(tape, random_matrix(5, 8, rng, -3, 3), random_matrix(7, 8, rng, -3, 3), h);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) s += r.weights.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(AttendHead, ScalingQueryAndKeyWeightsOppositelyKeepsWeights) {
  Rng rng(6);
  Tape tape;
  HeadParams h = random_head(8, 4, rng);
  Tensor q = random_matrix(3, 8, rng), s = random_matrix(5, 8, rng);
  auto base = attend_head(tape, q, s, h);
  for (double c : {0.1, 3.0, -2.5}) {
    HeadParams hc{scale(tape, h.wq, c), scale(tape, h.wk, 1.0 / c), h.wv};
    EXPECT_LE(max_abs_diff(attend_head(tape, q, s, hc).weights, base.weights), 1e-9);
  }
}

TEST(MultiHead, SingleHeadIsHeadTimesOutputProjection) {
  Rng rng(7);
  Tape tape;
  auto p = MultiHeadParams::init(4, 1, rng);
  Tensor q = random_matrix(3, 4, rng), s = random_matrix(5, 4, rng);
  Tensor expect = matmul(tape, attend_head(tape, q, s, p.heads[0]).out, p.wo);
  EXPECT_LE(max_abs_diff(multi_head(tape, q, s, p).out, expect), 1e-15);
}

TEST(MultiHead, MatchesNaiveLoops) {
  Rng rng(8);
  Tape tape;
  auto p = MultiHeadParams::init(8, 4, rng);
  Tensor q = random_matrix(4, 8, rng), s = random_matrix(6, 8, rng);
  naive::Mat w;
  const auto out = naive::multi_head(naive::to_mat(q), naive::to_mat(s), p, &w);
  auto r = multi_head(tape, q, s, p);
  EXPECT_LE(naive::max_diff(out, r.out), 1e-12);
  EXPECT_LE(naive::max_diff(w, r.mean_weights()), 1e-12);
  EXPECT_EQ(r.weights.size(), 4u);
}

TEST(MultiHead, SourcePermutationInvariance) {
  Rng rng(9);
  Tape tape;
  for (int trial = 0; trial < 20; ++trial) {
    auto p = MultiHeadParams::init(8, 2, rng);
    Tensor q = random_matrix(4, 8, rng), s = random_matrix(6, 8, rng);
    Tensor out = multi_head(tape, q, s, p).out;
    Tensor permuted = multi_head(tape, q, permute_rows(s, random_perm(6, rng)), p).out;
    EXPECT_LE(max_abs_diff(out, permuted), 1e-12);
  }
}

TEST(MultiHead, QueryPermutationEquivariance) {
  Rng rng(10);
  Tape tape;
  auto p = MultiHeadParams::init(8, 2, rng);
  Tensor q = random_matrix(5, 8, rng), s = random_matrix(6, 8, rng);
  const auto perm = random_perm(5, rng);
  Tensor out = multi_head(tape, q, s, p).out;
  Tensor permuted = multi_head(tape, permute_rows(q, perm), s, p).out;
  EXPECT_LE(max_abs_diff(permute_rows(out, perm), permuted), 1e-12);
}

TEST(MultiHead, HeadCountMustDivideWidth) {
  Rng rng(11);
  EXPECT_THROW(MultiHeadParams::init(8, 3, rng), ConfigError);
}

TEST(Fcn, ZeroWeightsGiveZero) {
  Tape tape;
  FcnParams p{Tensor({4, 8}), Tensor({8}), Tensor({8, 4}), Tensor({4})};
  Rng rng(12);
  Tensor y = fcn(tape, random_matrix(3, 4, rng), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fcn, PositionWiseAndMatchesNaive) {
  Rng rng(13);
  Tape tape;
  auto p = FcnParams::init(4, 8, rng);
  for (auto& v : p.b1.data()) v = rng.uniform(-0.5, 0.5);
  for (auto& v : p.b2.data()) v = rng.uniform(-0.5, 0.5);
  Tensor x = random_matrix(4, 4, rng);
  for (std::size_t j = 0; j < 4; ++j) x.at(3, j) = x.at(1, j);
  Tensor y = fcn(tape, x, p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y.at(3, j), y.at(1, j));
  EXPECT_LE(naive::max_diff(naive::fcn(naive::to_mat(x), p), y), 1e-12);

  const auto perm = random_perm(4, rng);
  EXPECT_LE(max_abs_diff(fcn(tape, permute_rows(x, perm), p), permute_rows(y, perm)), 1e-15);
}

TEST(SublayerPost, DegenerateInputs) {
  Rng rng(14);
  Tape tape;
  auto ln = LayerNormParams::init(6);
  for (auto& v : ln.gain.data()) v = rng.uniform(0.5, 1.5);
  Tensor src = random_matrix(3, 6, rng);
  EXPECT_LE(max_abs_diff(sublayer_post(tape, Tensor({3, 6}), src, ln, 0.3, Mode::eval, rng),
                         layer_norm_rows(tape, src, ln.gain, ln.bias)),
            0.0);
  EXPECT_LE(max_abs_diff(sublayer_post(tape, src, Tensor({3, 6}), ln, 0.3, Mode::eval, rng),
                         layer_norm_rows(tape, src, ln.gain, ln.bias)),
            0.0);
  EXPECT_THROW(sublayer_post(tape, Tensor({3, 6}), Tensor({2, 6}), ln, 0.0, Mode::eval, rng), ShapeError);
}

TEST(SublayerPost, TrainModeMatchesHandComposition) {
  Rng rng(15);
  Tape tape;
  auto ln = LayerNormParams::init(6);
  Tensor sub = random_matrix(4, 6, rng), src = random_matrix(4, 6, rng);
  Rng a(77), b(77);
  Tensor got = sublayer_post(tape, sub, src, ln, 0.25, Mode::train, a);

  // Redraw the same mask from an identical generator and compose by hand.
  naive::Mat dropped = naive::to_mat(sub);
  for (auto& row : dropped)
    for (auto& v : row) v = b.uniform() < 0.25 ? 0.0 : v / 0.75;
  const auto expect = naive::layer_norm(naive::add(dropped, naive::to_mat(src)), naive::to_vec(ln.gain),
                                        naive::to_vec(ln.bias), 1e-5);
  EXPECT_LE(naive::max_diff(expect, got), 1e-12);
}

TEST(Gradients, EveryAttentionParameterReceivesGradient) {
  Rng rng(16);
  auto mh = MultiHeadParams::init(8, 2, rng);
  auto ff = FcnParams::init(8, 16, rng);
  for (auto& v : ff.b1.data()) v = rng.uniform(-0.5, 0.5);
  Tensor q = random_matrix(3, 8, rng), s = random_matrix(3, 8, rng), w = random_matrix(3, 8, rng);
  ParamList ps;
  mh.append_to(ps, "mh");
  ff.append_to(ps, "fcn");
  auto loss = [&](Tape& t) { return sum(t, mul(t, fcn(t, multi_head(t, q, s, mh).out, ff), w)); };
  auto err = check_gradients(loss, ps);
  EXPECT_LE(err.max_rel_error, 1e-5) << err.worst_input;

  Tape tape;
  tape.backward(loss(tape));
  for (const auto& p : ps) {
    const auto g = p.tensor.grad_or_zeros();
    double mag = 0.0;
    for (double v : g) mag = std::max(mag, std::abs(v));
    EXPECT_GT(mag, 0.0) << p.name;
  }
}
