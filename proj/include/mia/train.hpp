#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mia/bleu.hpp"
#include "mia/checkpoint.hpp"
#include "mia/model.hpp"

namespace mia {

struct StepInfo {
  std::size_t epoch = 0; // 0-based
  std::size_t step = 0;  // within the epoch
  const CaptionModel* model = nullptr;
  const ParamList* params = nullptr; // gradients populated, before the update
  double loss = 0.0;
};

using StepCallback = std::function<void(const StepInfo&)>;

struct TrainResult {
  CaptionModel model;
  Checkpoint checkpoint;
  std::vector<double> loss_log; // mean cross-entropy per token, one entry per epoch
};

namespace detail {

inline std::string describe_non_finite(const Tape& tape, const CaptionModel& m, const FeatureBundle& b) {
  if (!b.visual.all_finite()) return "input tensor 'visual' of image " + std::to_string(b.image_id);
  if (!b.concepts.all_finite()) return "input tensor 'concepts' of image " + std::to_string(b.image_id);
  for (const auto& p : m.params())
    if (!p.tensor.all_finite()) return "parameter '" + p.name + "'";
  if (auto bad = tape.first_non_finite())
    return "output of op #" + std::to_string(bad->first) + " (" + bad->second + ")";
  return "loss";
}

inline Checkpoint snapshot(const CaptionModel& m, const AdamState& adam, const Rng& rng, std::uint64_t epochs,
                           const std::vector<double>& log) {
  Checkpoint c;
  c.config = m.config;
  c.vocab = m.vocab;
  for (const auto& p : m.params()) c.params.push_back({p.name, p.tensor.clone()});
  c.adam = adam;
  c.rng = rng.state();
  c.epochs_done = epochs;
  c.loss_log = log;
  return c;
}

} // namespace detail

/// Teacher-forced cross-entropy training with Adam. Gradients reach the MIA
/// parameters whenever the feature source routes through MIA. Training stops
/// when cfg.epochs epochs have been completed in total, so a resumed run
/// continues from the checkpoint's epoch count.
inline TrainResult train(const TrainConfig& cfg_in, const Dataset& data, const Checkpoint* resume = nullptr,
                         const StepCallback& on_step = {}) {
  if (data.bundles.empty()) throw ContractError("training needs a non-empty dataset");
  TrainConfig cfg = cfg_in;
  if (resume) {
    // A resumed run keeps its original configuration; only the target epoch count changes.
    cfg = resume->config;
    cfg.epochs = cfg_in.epochs;
  }
  cfg.mia.d_h = data.bundles.front().width();
  for (const auto& b : data.bundles)
    if (b.width() != cfg.mia.d_h || b.visual.rows() != b.concepts.rows())
      throw ShapeError("dataset bundles disagree on feature shape");
  cfg.validate();

  CaptionModel model;
  AdamState adam;
  Rng rng(0);
  std::vector<double> log;
  std::uint64_t done = 0;
  if (resume) {
    if (!(resume->vocab == data.vocab)) throw VocabMismatchError("checkpoint vocabulary differs from dataset");
    model = model_from_checkpoint(*resume);
    adam = resume->adam;
    rng = Rng::from_state(resume->rng);
    log = resume->loss_log;
    done = resume->epochs_done;
  } else {
    Rng master(cfg.seed);
    Rng init = master.split();
    model = CaptionModel::init(cfg, data.vocab, init);
    rng = master.split();
  }

  ParamList params = model.params();
  for (const auto& b : data.bundles)
    for (const auto& c : b.captions)
      for (auto id : data.vocab.encode(c))
        if (id == Vocabulary::unk) throw VocabMismatchError("caption token missing from vocabulary");

  for (std::uint64_t epoch = done; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    std::size_t tokens = 0;
    zero_grads(params);
    for (std::size_t i = 0; i < data.bundles.size(); ++i) {
      const auto& b = data.bundles[i];
      Tape tape;
      if (!b.visual.all_finite() || !b.concepts.all_finite())
        throw NumericError("non-finite input at epoch " + std::to_string(epoch + 1) + ": " +
                           detail::describe_non_finite(tape, model, b));
      auto fwd = forward(tape, model, b, Mode::train, rng);
      const double loss = fwd.loss.item();
      if (!std::isfinite(loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", image " +
                           std::to_string(b.image_id) + "; first non-finite tensor: " +
                           detail::describe_non_finite(tape, model, b));
      tape.backward(fwd.loss);
      total += loss;
      tokens += fwd.tokens;
      const bool last = i + 1 == data.bundles.size();
      if ((i + 1) % cfg.batch_size == 0 || last) {
        if (on_step) on_step({static_cast<std::size_t>(epoch), i, &model, &params, loss});
        adam_step(params, adam, cfg.adam);
        zero_grads(params);
      }
    }
    log.push_back(total / static_cast<double>(tokens));
  }
  model.config.epochs = cfg.epochs;
  auto ckpt = detail::snapshot(model, adam, rng, std::max<std::uint64_t>(done, cfg.epochs), log);
  return {std::move(model), std::move(ckpt), std::move(log)};
}

inline std::string loss_csv(const std::vector<double>& log) {
  std::ostringstream os;
  os << "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < log.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", log[i]);
    os << (i + 1) << ',' << buf << '\n';
  }
  return os.str();
}

struct Metrics {
  double bleu[4] = {0, 0, 0, 0}; // mean BLEU-1..4
  double token_accuracy = 0.0;   // teacher-forced argmax accuracy
  std::size_t examples = 0;

  nlohmann::json to_json() const {
    return {{"bleu1", bleu[0]},
            {"bleu2", bleu[1]},
            {"bleu3", bleu[2]},
            {"bleu4", bleu[3]},
            {"token_accuracy", token_accuracy},
            {"examples", examples}};
  }
};

inline double token_accuracy(const CaptionModel& m, const Dataset& data) {
  std::size_t correct = 0, tokens = 0;
  for (const auto& b : data.bundles) {
    Tape tape;
    tape.set_recording(false);
    Rng unused(0);
    auto fwd = forward(tape, m, b, Mode::eval, unused);
    correct += fwd.correct;
    tokens += fwd.tokens;
  }
  return tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
}

/// Greedy-decodes every bundle and scores it against its captions.
inline Metrics eval_run(const CaptionModel& m, const Dataset& data) {
  if (data.bundles.empty()) throw ContractError("evaluation needs a non-empty dataset");
  if (!(m.vocab == data.vocab)) throw VocabMismatchError("checkpoint vocabulary differs from dataset vocabulary");
  Metrics out;
  for (const auto& b : data.bundles) {
    const auto hyp = m.vocab.decode(caption_image(m, b));
    for (std::size_t n = 1; n <= 4; ++n) out.bleu[n - 1] += bleu(b.captions, hyp, n);
  }
  for (auto& v : out.bleu) v /= static_cast<double>(data.bundles.size());
  out.token_accuracy = token_accuracy(m, data);
  out.examples = data.bundles.size();
  return out;
}

inline Metrics eval_run(const Checkpoint& c, const Dataset& data) { return eval_run(model_from_checkpoint(c), data); }

// ---------------------------------------------------------------------------
// Attention trace export.

inline std::string matrix_csv(const Tensor& m) {
  std::ostringstream os;
  char buf[64];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", m.at(i, j));
      os << (j ? "," : "") << buf;
    }
    os << '\n';
  }
  return os.str();
}

/// Binary PGM where each row is scaled so its largest weight maps to 255.
inline std::vector<std::uint8_t> matrix_pgm(const Tensor& m) {
  std::ostringstream header;
  header << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) mx = std::max(mx, m.at(i, j));
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double v = mx > 0.0 ? m.at(i, j) / mx : 0.0;
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
  return out;
}

/// Writes iter{t}_{visual|textual}_{raw|accum}.{csv|pgm} for every iteration
/// of an eval-mode MIA pass and returns the paths written.
inline std::vector<std::filesystem::path> export_trace(const CaptionModel& m, const FeatureBundle& b,
                                                       const std::filesystem::path& out_dir) {
  if (!m.mia) throw ContractError("model has no MIA parameters to trace");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  Tape tape;
  tape.set_recording(false);
  Rng unused(0);
  auto refined = mia_refine(tape, b.visual, b.concepts, *m.mia, m.config.mia, Mode::eval, unused);
  const auto acc = accumulate_trace(refined.trace);

  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& stem, const Tensor& mat) {
    const auto csv = out_dir / (stem + ".csv");
    const auto pgm = out_dir / (stem + ".pgm");
    binio::write_text(csv, matrix_csv(mat));
    binio::write_file(pgm, matrix_pgm(mat));
    written.push_back(csv);
    written.push_back(pgm);
  };
  for (std::size_t t = 0; t < refined.trace.rounds.size(); ++t) {
    const std::string it = "iter" + std::to_string(t + 1);
    emit(it + "_visual_raw", refined.trace.rounds[t].visual);
    emit(it + "_visual_accum", acc.visual[t]);
    emit(it + "_textual_raw", refined.trace.rounds[t].textual);
    emit(it + "_textual_accum", acc.textual[t]);
  }
  return written;
}

// ---------------------------------------------------------------------------
// Iteration sweep.

struct SweepRow {
  std::size_t iterations = 0;
  double final_loss = 0.0;
  std::size_t param_count = 0;
  Metrics metrics;
};

/// Trains one model per iteration count and evaluates it on the training data.
inline std::vector<SweepRow> sweep_iterations(const TrainConfig& base, const Dataset& data,
                                              const std::vector<std::size_t>& iteration_counts, bool parallel = false) {
  std::vector<SweepRow> rows(iteration_counts.size());
  auto run_one = [&](std::size_t i) {
    TrainConfig cfg = base;
    cfg.mia.iterations = iteration_counts[i];
    auto r = train(cfg, data);
    rows[i] = {iteration_counts[i], r.loss_log.empty() ? 0.0 : r.loss_log.back(), count_scalars(r.model.params()),
               eval_run(r.model, data)};
  };
  if (parallel) {
    std::vector<std::exception_ptr> errors(rows.size());
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < rows.size(); ++i)
      workers.emplace_back([&, i] {
        try {
          run_one(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < rows.size(); ++i) run_one(i);
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "iters,final_loss,token_accuracy,bleu1,bleu2,bleu3,bleu4,param_count\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu\n", r.iterations, r.final_loss,
                  r.metrics.token_accuracy, r.metrics.bleu[0], r.metrics.bleu[1], r.metrics.bleu[2], r.metrics.bleu[3],
                  r.param_count);
    os << buf;
  }
  return os.str();
}

} // namespace mia
