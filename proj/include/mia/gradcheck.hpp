#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mia/model.hpp"

namespace mia {

using LossFn = std::function<Tensor(Tape&)>;

struct GradError {
  double max_rel_error = 0.0;
  std::string worst_input;
  std::vector<std::pair<std::string, double>> per_input;
};

/// Compares tape gradients of `loss` against central differences for each
/// listed input. Per input the error is max|analytic - numeric| divided by
/// max(max|analytic|, max|numeric|, 1e-8); the worst input is reported.
inline GradError check_gradients(const LossFn& loss, ParamList inputs, double eps = 1e-6) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  GradError worst;
  Tape probe;
  probe.set_recording(false);
  for (auto& in : inputs) {
    const auto analytic = in.tensor.grad_or_zeros();
    auto data = in.tensor.data();
    double diff = 0.0, scale = 1e-8;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = loss(probe).item();
      data[i] = saved - eps;
      const double down = loss(probe).item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      diff = std::max(diff, std::abs(analytic[i] - numeric));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    }
    const double rel = diff / scale;
    worst.per_input.emplace_back(in.name, rel);
    if (rel > worst.max_rel_error || worst.worst_input.empty()) {
      worst.max_rel_error = rel;
      worst.worst_input = in.name;
    }
    in.tensor.zero_grad();
  }
  return worst;
}

struct GradCheckCase {
  std::string name;
  double tolerance = 1e-6;
  // Also report one entry per parameter group (first three name components).
  bool per_group = false;
  // Builds the loss closure and the tensors to differentiate, from a seeded generator.
  std::function<std::pair<LossFn, ParamList>(Rng&)> build;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::string worst_input;
  bool pass() const { return max_rel_error <= tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool all_pass() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass(); });
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : entries)
      rows.push_back({{"name", e.name},
                      {"max_rel_error", e.max_rel_error},
                      {"tolerance", e.tolerance},
                      {"worst_input", e.worst_input},
                      {"pass", e.pass()}});
    return {{"pass", all_pass()}, {"checks", rows}};
  }
};

namespace gradcheck_detail {

inline Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c}, 0.0, true);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Keeps values at least `gap` away from zero, for kinked ops.
inline Tensor random_away_from_zero(std::size_t r, std::size_t c, Rng& rng, double gap) {
  Tensor t = random_matrix(r, c, rng);
  for (auto& v : t.data()) v = v >= 0 ? v + gap : v - gap;
  return t;
}

// Weighted sum against fixed random weights so every output entry matters.
inline Tensor probe_loss(Tape& tape, const Tensor& out, const Tensor& weights) {
  return sum(tape, mul(tape, out, weights));
}

inline Tensor weights_like(const Tensor& t, Rng& rng) {
  Tensor w(t.shape());
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return w;
}

// Wraps a one-output op: inputs are built, a probe weight matrix is drawn from
// the op's output shape, and the loss is the weighted sum of that output.
template <class Op>
GradCheckCase unary_case(std::string name, double tol, std::vector<std::pair<std::size_t, std::size_t>> shapes, Op op,
                         double gap = 0.0) {
  return {name, tol, false, [shapes, op, gap](Rng& rng) {
            ParamList inputs;
            for (std::size_t i = 0; i < shapes.size(); ++i) {
              auto t = gap > 0 ? random_away_from_zero(shapes[i].first, shapes[i].second, rng, gap)
                               : random_matrix(shapes[i].first, shapes[i].second, rng);
              inputs.push_back({"x" + std::to_string(i), t});
            }
            Tape scratch;
            scratch.set_recording(false);
            std::vector<Tensor> ts;
            for (auto& in : inputs) ts.push_back(in.tensor);
            Tensor w = weights_like(op(scratch, ts), rng);
            LossFn loss = [op, ts, w](Tape& tape) { return probe_loss(tape, op(tape, ts), w); };
            return std::make_pair(loss, inputs);
          }};
}

} // namespace gradcheck_detail

/// Small MIA + decoder instance shared by the composite checks (d_h = 8, n = 3).
struct GradCheckFixture {
  MiaConfig mia_cfg;
  MiaParams mia;
  FeatureBundle bundle;
  Vocabulary vocab;

  static GradCheckFixture make(Rng& rng) {
    GradCheckFixture f;
    f.mia_cfg.d_h = 8;
    f.mia_cfg.heads = 2;
    f.mia_cfg.iterations = 2;
    f.mia_cfg.d_ff = 16;
    f.mia = MiaParams::init(f.mia_cfg, rng);
    // Layer-norm gains and biases start at 1/0; perturb them so their gradients are generic.
    for (auto& p : f.mia.params())
      if (p.name.find("norm") != std::string::npos || p.name.find("anchor") != std::string::npos ||
          p.name.find("fuse") != std::string::npos || p.name.find(".b") != std::string::npos)
        for (auto& v : p.tensor.data()) v += rng.uniform(-0.3, 0.3);
    f.bundle.visual = gradcheck_detail::random_matrix(3, 8, rng);
    f.bundle.concepts = gradcheck_detail::random_matrix(3, 8, rng);
    f.bundle.visual.set_requires_grad(false);
    f.bundle.concepts.set_requires_grad(false);
    f.bundle.concept_tokens = {"dog", "cat", "sat"};
    f.bundle.captions = {{"a", "dog", "sat"}};
    f.vocab = Vocabulary::from_words(std::vector<std::string>{"a", "dog", "cat", "sat"});
    return f;
  }
};

inline std::vector<GradCheckCase> default_grad_cases() {
  using namespace gradcheck_detail;
  using Ts = std::vector<Tensor>;
  std::vector<GradCheckCase> cases;

  cases.push_back(unary_case("scale", 1e-9, {{3, 4}}, [](Tape& t, const Ts& x) { return scale(t, x[0], 1.7); }));
  cases.push_back(unary_case("add", 1e-9, {{3, 4}, {3, 4}}, [](Tape& t, const Ts& x) { return add(t, x[0], x[1]); }));
  cases.push_back(unary_case("transpose", 1e-9, {{3, 4}}, [](Tape& t, const Ts& x) { return transpose(t, x[0]); }));
  cases.push_back(unary_case("mean_rows", 1e-9, {{3, 4}}, [](Tape& t, const Ts& x) { return mean_rows(t, x[0]); }));
  cases.push_back(unary_case("matmul", 1e-6, {{3, 4}, {4, 2}}, [](Tape& t, const Ts& x) { return matmul(t, x[0], x[1]); }));
  cases.push_back(unary_case("add_broadcast_row", 1e-6, {{3, 4}, {1, 4}},
                             [](Tape& t, const Ts& x) { return add_broadcast_row(t, x[0], x[1]); }));
  cases.push_back(unary_case("mul", 1e-6, {{3, 4}, {3, 4}}, [](Tape& t, const Ts& x) { return mul(t, x[0], x[1]); }));
  cases.push_back(unary_case("relu", 1e-6, {{3, 4}}, [](Tape& t, const Ts& x) { return relu(t, x[0]); }, 1e-3));
  cases.push_back(unary_case("tanh", 1e-6, {{3, 4}}, [](Tape& t, const Ts& x) { return tanh(t, x[0]); }));
  cases.push_back(unary_case("sigmoid", 1e-6, {{3, 4}}, [](Tape& t, const Ts& x) { return sigmoid(t, x[0]); }));
  cases.push_back(unary_case("softmax_rows", 1e-6, {{3, 5}}, [](Tape& t, const Ts& x) { return softmax_rows(t, x[0]); }));
  cases.push_back(unary_case("layer_norm_rows", 1e-6, {{3, 6}, {1, 6}, {1, 6}},
                             [](Tape& t, const Ts& x) { return layer_norm_rows(t, x[0], x[1], x[2], 1e-5); }));
  cases.push_back(unary_case("dropout", 1e-6, {{4, 5}}, [](Tape& t, const Ts& x) {
    Rng r(99); // same mask on every evaluation
    return dropout(t, x[0], 0.3, Mode::train, r);
  }));
  cases.push_back(unary_case("concat_cols", 1e-6, {{2, 3}, {2, 2}},
                             [](Tape& t, const Ts& x) { return concat_cols(t, {x[0], x[1]}); }));
  cases.push_back(unary_case("slice_cols", 1e-6, {{2, 6}}, [](Tape& t, const Ts& x) { return slice_cols(t, x[0], 1, 3); }));
  cases.push_back(unary_case("embedding_lookup", 1e-6, {{5, 3}},
                             [](Tape& t, const Ts& x) { return embedding_lookup(t, x[0], 2); }));
  cases.push_back(unary_case("cross_entropy", 1e-6, {{1, 7}}, [](Tape& t, const Ts& x) { return cross_entropy(t, x[0], 3); }));

  cases.push_back({"attend_head", 1e-6, false, [](Rng& rng) {
                     auto q = random_matrix(3, 8, rng), s = random_matrix(4, 8, rng);
                     HeadParams h{random_matrix(8, 4, rng), random_matrix(8, 4, rng), random_matrix(8, 4, rng)};
                     Tensor w = weights_like(Tensor({3, 4}), rng);
                     LossFn loss = [=](Tape& t) { return probe_loss(t, attend_head(t, q, s, h).out, w); };
                     return std::make_pair(loss, ParamList{{"q", q}, {"s", s}, {"wq", h.wq}, {"wk", h.wk}, {"wv", h.wv}});
                   }});
  cases.push_back({"multi_head", 1e-6, false, [](Rng& rng) {
                     auto q = random_matrix(3, 8, rng), s = random_matrix(3, 8, rng);
                     auto p = MultiHeadParams::init(8, 2, rng);
                     Tensor w = weights_like(Tensor({3, 8}), rng);
                     LossFn loss = [=](Tape& t) { return probe_loss(t, multi_head(t, q, s, p).out, w); };
                     ParamList in{{"q", q}, {"s", s}};
                     p.append_to(in, "mh");
                     return std::make_pair(loss, in);
                   }});
  cases.push_back({"fcn", 1e-6, false, [](Rng& rng) {
                     auto x = random_matrix(3, 8, rng);
                     auto p = FcnParams::init(8, 16, rng);
                     for (auto& v : p.b1.data()) v = rng.uniform(-0.5, 0.5);
                     Tensor w = weights_like(Tensor({3, 8}), rng);
                     LossFn loss = [=](Tape& t) { return probe_loss(t, fcn(t, x, p), w); };
                     ParamList in{{"x", x}};
                     p.append_to(in, "fcn");
                     return std::make_pair(loss, in);
                   }});
  cases.push_back({"sublayer_post", 1e-6, false, [](Rng& rng) {
                     auto sub = random_matrix(3, 8, rng), src = random_matrix(3, 8, rng);
                     LayerNormParams ln{random_matrix(1, 8, rng, 0.5, 1.5), random_matrix(1, 8, rng)};
                     Tensor w = weights_like(Tensor({3, 8}), rng);
                     LossFn loss = [=](Tape& t) {
                       Rng r(5);
                       return probe_loss(t, sublayer_post(t, sub, src, ln, 0.2, Mode::train, r), w);
                     };
                     return std::make_pair(loss, ParamList{{"sub_out", sub}, {"source", src}, {"gain", ln.gain}, {"bias", ln.bias}});
                   }});
  cases.push_back({"lstm_step", 1e-6, false, [](Rng& rng) {
                     auto x = random_matrix(1, 8, rng);
                     auto p = LstmParams::init(8, 8, rng);
                     LstmState s{random_matrix(1, 8, rng), random_matrix(1, 8, rng)};
                     Tensor w = weights_like(Tensor({1, 8}), rng), wc = weights_like(Tensor({1, 8}), rng);
                     LossFn loss = [=](Tape& t) {
                       auto n = lstm_step(t, p, s, x);
                       return add(t, probe_loss(t, n.h, w), probe_loss(t, n.c, wc));
                     };
                     ParamList in{{"x", x}, {"h", s.h}, {"c", s.c}};
                     p.append_to(in, "lstm");
                     return std::make_pair(loss, in);
                   }});
  cases.push_back({"additive_attend", 1e-6, false, [](Rng& rng) {
                     auto h = random_matrix(1, 8, rng), f = random_matrix(4, 8, rng);
                     auto p = AdditiveAttentionParams::init(8, 8, rng);
                     Tensor w = weights_like(Tensor({1, 8}), rng);
                     LossFn loss = [=](Tape& t) { return probe_loss(t, additive_attend(t, h, f, p).context, w); };
                     ParamList in{{"h", h}, {"features", f}};
                     p.append_to(in, "attn");
                     return std::make_pair(loss, in);
                   }});
  cases.push_back({"mia_refine", 1e-5, true, [](Rng& rng) {
                     auto fx = GradCheckFixture::make(rng);
                     Tensor w = weights_like(Tensor({3, 8}), rng);
                     fx.bundle.visual.set_requires_grad(true);
                     fx.bundle.concepts.set_requires_grad(true);
                     LossFn loss = [fx, w](Tape& t) {
                       Rng r(1);
                       auto out = mia_refine(t, fx.bundle.visual, fx.bundle.concepts, fx.mia, fx.mia_cfg, Mode::eval, r);
                       return probe_loss(t, out.fused, w);
                     };
                     ParamList in = fx.mia.params();
                     in.push_back({"visual0", fx.bundle.visual});
                     in.push_back({"textual0", fx.bundle.concepts});
                     return std::make_pair(loss, in);
                   }});

  for (auto variant : all_variants) {
    cases.push_back({"mia+" + std::string(variant_name(variant)), 1e-5, true, [variant](Rng& rng) {
                       auto fx = GradCheckFixture::make(rng);
                       TrainConfig cfg;
                       cfg.variant = variant;
                       cfg.features = FeatureSource::mia_fused;
                       cfg.mia = fx.mia_cfg;
                       CaptionModel m = CaptionModel::init(cfg, fx.vocab, rng);
                       m.mia = fx.mia;
                       LossFn loss = [m, fx](Tape& t) {
                         Rng r(1);
                         return forward(t, m, fx.bundle, Mode::eval, r).loss;
                       };
                       return std::make_pair(loss, m.params());
                     }});
  }
  return cases;
}

inline GradCheckReport grad_check_suite(std::uint64_t seed, const std::vector<GradCheckCase>& cases) {
  GradCheckReport report;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
    auto [loss, inputs] = cases[i].build(rng);
    auto err = check_gradients(loss, inputs);
    report.entries.push_back({cases[i].name, err.max_rel_error, cases[i].tolerance, err.worst_input});
    if (!cases[i].per_group) continue;
    std::map<std::string, GradCheckEntry> groups;
    for (const auto& [input, rel] : err.per_input) {
      std::size_t cut = 0;
      for (int k = 0; k < 3 && cut != std::string::npos; ++k) cut = input.find('.', cut ? cut + 1 : 0);
      const std::string key = cases[i].name + ":" + input.substr(0, cut);
      auto& g = groups[key];
      g.name = key;
      g.tolerance = cases[i].tolerance;
      if (rel >= g.max_rel_error) {
        g.max_rel_error = rel;
        g.worst_input = input;
      }
    }
    for (auto& [key, g] : groups) report.entries.push_back(std::move(g));
  }
  return report;
}

inline GradCheckReport grad_check_suite(std::uint64_t seed) { return grad_check_suite(seed, default_grad_cases()); }

} // namespace mia
