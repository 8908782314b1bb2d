// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all pass.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>

#include "mia/cli.hpp"
#include "mia/gradcheck.hpp"
#include "mia/train.hpp"
#include "naive_reference.hpp"

using namespace mia;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

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

double row_sum_error(const Tensor& w) {
  double worst = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) s += w.at(i, j);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

MiaParams perturbed_params(const MiaConfig& cfg, Rng& rng) {
  MiaParams p = MiaParams::init(cfg, rng);
  for (auto& np : p.params())
    if (np.tensor.rank() == 1) {
      const bool gain = np.name.ends_with("gain");
      for (auto& v : np.tensor.data()) v = gain ? rng.uniform(0.6, 1.4) : rng.uniform(-0.3, 0.3);
    }
  return p;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mia_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "mia");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  return code;
}

struct Outcome {
  bool pass;
  std::string detail;
};

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  auto report = grad_check_suite(0);
  const double secs = seconds_since(t0);
  double smooth = 0.0, full = 0.0;
  std::string failing;
  for (const auto& e : report.entries) {
    if (!e.pass()) failing += " " + e.name;
    if (e.name.rfind("mia", 0) == 0) full = std::max(full, e.max_rel_error);
    else smooth = std::max(smooth, e.max_rel_error);
  }
  std::ostringstream os;
  os << report.entries.size() << " checks, worst op " << smooth << ", worst full graph " << full << ", " << secs
     << " s" << (failing.empty() ? "" : ", failing:" + failing);
  return {report.all_pass() && smooth <= 1e-6 && full <= 1e-5 && secs < 120.0, os.str()};
}

Outcome oracle_equivalence() {
  Rng rng(2);
  MiaConfig cfg;
  cfg.d_h = 8;
  cfg.heads = 2;
  cfg.iterations = 2;
  cfg.d_ff = 16;
  double mia_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    auto p = perturbed_params(cfg, rng);
    Tensor vis = random_matrix(4, 8, rng), txt = random_matrix(4, 8, rng);
    Tape tape;
    tape.set_recording(false);
    auto round = mutual_round(tape, vis, txt, p, cfg, Mode::eval, rng);
    const auto nr = naive::mutual_round(naive::to_mat(vis), naive::to_mat(txt), p, cfg);
    mia_err = std::max({mia_err, naive::max_diff(nr.visual, round.visual), naive::max_diff(nr.textual, round.textual)});
    auto refined = mia_refine(tape, vis, txt, p, cfg, Mode::eval, rng);
    const auto nm = naive::mia_refine(naive::to_mat(vis), naive::to_mat(txt), p, cfg);
    mia_err = std::max({mia_err, naive::max_diff(nm.visual, refined.visual), naive::max_diff(nm.textual, refined.textual),
                        naive::max_diff(nm.fused, refined.fused)});
  }

  double dec_err = 0.0;
  for (auto v : all_variants) {
    auto m = DecoderModel::init(v, 11, 8, rng);
    for (auto& np : m.params())
      if (np.tensor.rank() == 1)
        for (auto& x : np.tensor.data()) x += rng.uniform(-0.3, 0.3);
    Tensor vis = random_matrix(5, 8, rng), con = random_matrix(5, 8, rng);
    Tape tape;
    tape.set_recording(false);
    auto f = DecoderFeatures::prepare(tape, vis, con);
    auto s = DecoderState::initial(m);
    auto ns = naive::initial(8);
    for (std::size_t tok : {std::size_t{1}, std::size_t{6}, std::size_t{9}}) {
      auto step = decoder_step(tape, m, s, tok, f);
      dec_err = std::max(dec_err, naive::max_diff(naive::decoder_step(m, ns, tok, naive::to_mat(vis), naive::to_mat(con)),
                                                  step.logits));
      s = step.state;
    }
  }
  std::ostringstream os;
  os << "MIA max diff " << mia_err << ", decoder steps max diff " << dec_err;
  return {mia_err <= 1e-9 && dec_err <= 1e-10, os.str()};
}

Outcome structural_invariants() {
  Rng rng(3);
  Tape tape;
  tape.set_recording(false);

  // (a) attention rows, everywhere a softmax is produced.
  double rows = 0.0;
  MiaConfig big;
  big.iterations = 3;
  big.per_head_traces = true;
  auto bp = MiaParams::init(big, rng);
  auto r = mia_refine(tape, random_matrix(49, 16, rng, -2, 2), random_matrix(49, 16, rng, -2, 2), bp, big, Mode::train, rng);
  for (const auto& round : r.trace.rounds) {
    rows = std::max({rows, row_sum_error(round.visual), row_sum_error(round.textual)});
    for (const auto& h : round.visual_heads) rows = std::max(rows, row_sum_error(h));
    for (const auto& h : round.textual_heads) rows = std::max(rows, row_sum_error(h));
  }
  for (auto v : {DecoderVariant::visual_attention, DecoderVariant::concept_attention,
                 DecoderVariant::visual_regional_attention}) {
    auto m = DecoderModel::init(v, 9, 16, rng);
    auto f = DecoderFeatures::prepare(tape, random_matrix(49, 16, rng), random_matrix(49, 16, rng));
    auto s = DecoderState::initial(m);
    for (int t = 0; t < 4; ++t) {
      auto step = decoder_step(tape, m, s, 4, f);
      rows = std::max(rows, row_sum_error(step.alpha));
      s = step.state;
    }
  }

  // (b) parameter count over N.
  std::vector<std::size_t> counts;
  for (std::size_t n = 1; n <= 5; ++n) {
    MiaConfig c;
    c.iterations = n;
    Rng init(0);
    counts.push_back(count_scalars(MiaParams::init(c, init).params()));
  }
  const bool same_count = std::all_of(counts.begin(), counts.end(), [&](auto c) { return c == counts[0]; });

  // (c) joint permutation of mia_refine.
  MiaConfig small;
  small.d_h = 8;
  small.heads = 2;
  auto sp = perturbed_params(small, rng);
  Tensor vis = random_matrix(6, 8, rng), txt = random_matrix(6, 8, rng);
  const auto perm = random_perm(6, rng);
  auto base = mia_refine(tape, vis, txt, sp, small, Mode::eval, rng);
  auto permuted = mia_refine(tape, permute_rows(vis, perm), permute_rows(txt, perm), sp, small, Mode::eval, rng);
  const double equiv = std::max({max_abs_diff(permute_rows(base.visual, perm), permuted.visual),
                                 max_abs_diff(permute_rows(base.textual, perm), permuted.textual),
                                 max_abs_diff(permute_rows(base.fused, perm), permuted.fused)});

  // (d) source permutation of bare multi_head.
  auto mh = MultiHeadParams::init(16, 8, rng);
  Tensor q = random_matrix(7, 16, rng), s = random_matrix(9, 16, rng);
  const double invariance =
      max_abs_diff(multi_head(tape, q, s, mh).out, multi_head(tape, q, permute_rows(s, random_perm(9, rng)), mh).out);

  // (e) fused shape.
  bool shapes = true;
  MiaConfig def;
  auto dp = MiaParams::init(def, rng);
  for (std::size_t n : {1u, 4u, 36u, 49u}) {
    auto out = mia_refine(tape, random_matrix(n, 16, rng), random_matrix(n, 16, rng), dp, def, Mode::eval, rng);
    shapes = shapes && out.fused.shape() == Shape{n, 16};
  }

  std::ostringstream os;
  os << "(a) row-sum err " << rows << " (b) param counts " << (same_count ? "equal" : "differ") << " ("
     << counts[0] << ") (c) equivariance " << equiv << " (d) invariance " << invariance << " (e) shapes "
     << (shapes ? "ok" : "wrong");
  return {rows <= 1e-12 && same_count && equiv <= 1e-9 && invariance <= 1e-12 && shapes, os.str()};
}

Dataset overfit_dataset() {
  SceneConfig sc; // n = 49, d_h = 16
  sc.seed = 4;
  Dataset ds;
  ds.bundles = generate_scenes(sc, 4);
  ds.vocab = build_vocab(ds.bundles);
  return ds;
}

TrainConfig overfit_config(DecoderVariant v, FeatureSource f) {
  TrainConfig cfg;
  cfg.variant = v;
  cfg.features = f;
  cfg.epochs = 500;
  cfg.seed = 1;
  return cfg;
}

Outcome overfit() {
  const Dataset ds = overfit_dataset();
  bool ok = true;
  std::ostringstream os;
  os << "|V|=" << ds.vocab.size();
  double slowest = 0.0;
  for (auto f : {FeatureSource::original, FeatureSource::mia_fused}) {
    for (auto v : all_variants) {
      const auto t0 = Clock::now();
      auto r = train(overfit_config(v, f), ds);
      const double secs = seconds_since(t0);
      slowest = std::max(slowest, secs);
      const double acc = token_accuracy(r.model, ds);
      bool reproduces = true;
      for (const auto& b : ds.bundles)
        reproduces = reproduces && r.model.vocab.decode(caption_image(r.model, b)) == b.captions[0];
      const bool run_ok = acc >= 0.99 && reproduces && secs < 600.0;
      ok = ok && run_ok;
      os << "; " << variant_name(v) << "/" << feature_source_name(f) << " acc " << acc
         << (reproduces ? "" : " (greedy mismatch)");
    }
  }
  os << "; slowest run " << slowest << " s";
  return {ok, os.str()};
}

Outcome sweep() {
  auto data = scratch("sweep_data");
  if (run_cli({"gen-data", "--out", data.string(), "--scenes", "4", "--seed", "4"}) != 0) return {false, "gen-data failed"};
  std::string out;
  const int code = run_cli({"sweep-iters", "--data", data.string(), "--features", "mia", "--epochs", "20", "--iters",
                            "1..5", "--out", scratch("sweep_run").string()},
                           &out);
  if (code != 0) return {false, "sweep-iters exit " + std::to_string(code)};
  auto doc = nlohmann::json::parse(out);
  std::vector<std::size_t> iters;
  for (const auto& row : doc["rows"]) iters.push_back(row["iters"].get<std::size_t>());
  const bool ok = iters == std::vector<std::size_t>{1, 2, 3, 4, 5};
  return {ok, std::to_string(iters.size()) + " rows for N=1..5"};
}

Outcome bleu_fixture() {
  const std::vector<std::vector<std::string>> refs{{"the", "cat", "sat"}};
  const double b1 = bleu(refs, {"the", "cat"}, 1);
  const double same = bleu(refs, {"the", "cat", "sat"}, 4);
  std::ostringstream os;
  os.precision(12);
  os << "BLEU-1 " << b1 << " (expected " << std::exp(-0.5) << "), identical " << same;
  return {std::abs(b1 - std::exp(-0.5)) <= 1e-9 && same == 1.0, os.str()};
}

Outcome format_robustness() {
  SceneConfig sc;
  Rng rng(7);
  auto bundle = generate_scene(sc, 0, rng);
  const auto fbytes = encode_bundle(bundle);
  bool ok = encode_bundle(decode_bundle(fbytes)) == fbytes;

  Dataset ds;
  ds.bundles = {bundle};
  ds.vocab = build_vocab(ds.bundles);
  TrainConfig cfg;
  cfg.features = FeatureSource::mia_fused;
  cfg.epochs = 1;
  const auto cbytes = encode_checkpoint(train(cfg, ds).checkpoint);
  ok = ok && encode_checkpoint(decode_checkpoint(cbytes)) == cbytes;

  std::size_t typed = 0, untyped = 0;
  Rng fuzz(2024);
  for (int trial = 0; trial < 100; ++trial) {
    for (const auto* bytes : {&fbytes, &cbytes}) {
      auto c = *bytes;
      c[fuzz.below(bytes == &fbytes ? feature_header_size : 6)] ^= static_cast<std::uint8_t>(1 + fuzz.below(255));
      try {
        if (bytes == &fbytes) decode_bundle(c);
        else decode_checkpoint(c);
        ++untyped; // accepted a corrupt header
      } catch (const FormatError&) {
        ++typed;
      } catch (...) {
        ++untyped;
      }
    }
  }
  std::ostringstream os;
  os << "round trips " << (ok ? "bit-exact" : "differ") << ", " << typed << "/200 corruptions typed, " << untyped
     << " not";
  return {ok && untyped == 0, os.str()};
}

Outcome determinism() {
  auto data = scratch("det_data");
  if (run_cli({"gen-data", "--out", data.string(), "--scenes", "3", "--n-features", "12", "--seed", "8"}) != 0)
    return {false, "gen-data failed"};
  auto a = scratch("det_a"), b = scratch("det_b"), half = scratch("det_half"), resumed = scratch("det_resumed");
  const std::vector<std::string> common{"--data", data.string(), "--variant", "regional-attn", "--features", "mia",
                                        "--seed", "11"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = std::vector<std::string>{"train"};
    args.insert(args.end(), common.begin(), common.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  };
  if (with({"--epochs", "20", "--out", a.string()}) || with({"--epochs", "20", "--out", b.string()}) ||
      with({"--epochs", "10", "--out", half.string()}) ||
      with({"--epochs", "20", "--resume", (half / "checkpoint.miac").string(), "--out", resumed.string()}))
    return {false, "a training run failed"};
  const bool same = binio::read_file(a / "loss.csv") == binio::read_file(b / "loss.csv");
  const bool resume_same = binio::read_file(a / "loss.csv") == binio::read_file(resumed / "loss.csv") &&
                           binio::read_file(a / "checkpoint.miac") == binio::read_file(resumed / "checkpoint.miac");
  return {same && resume_same, std::string("repeat run ") + (same ? "identical" : "differs") + ", resumed run " +
                                   (resume_same ? "identical" : "differs")};
}

} // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 gradient suite", gradient_suite},
      {"2 oracle equivalence", oracle_equivalence},
      {"3 structural invariants", structural_invariants},
      {"4 overfit experiment", overfit},
      {"5 iteration sweep", sweep},
      {"6 BLEU fixture", bleu_fixture},
      {"7 format robustness", format_robustness},
      {"8 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
