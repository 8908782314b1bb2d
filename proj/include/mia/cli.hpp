#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mia/gradcheck.hpp"
#include "mia/synth.hpp"
#include "mia/train.hpp"

namespace mia::cli {

inline constexpr const char* tool_version = "0.1.0";

enum ExitCode : int { ok = 0, check_failed = 1, bad_args = 2, io_failure = 3, numeric_abort = 4 };

namespace fs = std::filesystem;
using nlohmann::json;

// UTC timestamp; honours SOURCE_DATE_EPOCH so reruns can be byte-identical.
inline std::string timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_manifest(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                           const std::string& started) {
  json m{{"command", command},
         {"config", config},
         {"tool_version", tool_version},
         {"seed", seed},
         {"started_at", started},
         {"finished_at", timestamp()}};
  binio::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// Config file contents; a run manifest is accepted and its "config" member used.
inline json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(binio::read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  if (j.contains("config") && j.contains("command")) j = j.at("config");
  if (!j.is_object()) throw ConfigError("config file '" + path + "' must hold a JSON object");
  return j;
}

inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("MIA_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const auto v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("MIA_SEED is not an integer: ") + s);
  return v;
}

/// Parses "1..5" or "1,2,4" into a list of iteration counts.
inline std::vector<std::size_t> parse_iteration_list(const std::string& spec) {
  std::vector<std::size_t> out;
  try {
    if (auto dots = spec.find(".."); dots != std::string::npos) {
      const auto lo = std::stoul(spec.substr(0, dots));
      const auto hi = std::stoul(spec.substr(dots + 2));
      if (lo == 0 || hi < lo) throw ConfigError("iteration range '" + spec + "' is empty or starts at 0");
      for (auto i = lo; i <= hi; ++i) out.push_back(i);
    } else {
      std::size_t pos = 0;
      while (pos <= spec.size()) {
        const auto comma = spec.find(',', pos);
        const auto v = std::stoul(spec.substr(pos, comma - pos));
        if (v == 0) throw ConfigError("iteration counts must be positive");
        out.push_back(v);
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
    }
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse iteration list '" + spec + "'");
  }
  return out;
}

// Flags shared by train and sweep-iters. Only flags the user actually passed
// override the config file.
struct TrainFlags {
  std::string config_path, data, out, variant, features, guiding, resume;
  std::size_t heads = 0, iters = 0, d_ff = 0, epochs = 0, batch_size = 0, max_len = 0;
  std::uint64_t seed = 0;
  double lr = 0, dropout = 0;
  bool self_attn = false, no_anchor = false;
  std::vector<CLI::Option*> opts;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file or run manifest");
    opts = {
        cmd->add_option("--data", data, "dataset directory"),
        cmd->add_option("--variant", variant, "visual-attn|concept-attn|visual-cond|concept-cond|regional-attn"),
        cmd->add_option("--features", features, "original|mia|mia-visual|mia-textual"),
        cmd->add_option("--heads", heads, "attention heads (default 8)"),
        cmd->add_option("--guiding", guiding, "concepts-first|visual-first"),
        cmd->add_flag("--self-attn-ablation", self_attn, "replace mutual attention with self-attention"),
        cmd->add_flag("--no-anchor", no_anchor, "disable the per-iteration layer shortcut"),
        cmd->add_option("--dropout", dropout, "dropout probability (default 0.1)"),
        cmd->add_option("--d-ff", d_ff, "FCN hidden width (default 4*d_h)"),
        cmd->add_option("--lr", lr, "Adam learning rate (default 1e-3)"),
        cmd->add_option("--epochs", epochs, "total epochs"),
        cmd->add_option("--batch-size", batch_size, "bundles per Adam step"),
        cmd->add_option("--max-len", max_len, "greedy decoding length limit"),
        cmd->add_option("--seed", seed, "random seed (falls back to MIA_SEED)"),
        cmd->add_option("--out", out, "output directory"),
    };
  }

  bool given(std::size_t i) const { return opts[i]->count() > 0; }

  // Resolved config as JSON: defaults < config file < flags.
  json resolve() const {
    json j = TrainConfig{}.to_json();
    j.erase("d_h");
    j["d_ff"] = 0;
    j["seed"] = env_seed().value_or(0);
    j["data"] = "";
    j["out"] = "";
    j.update(load_config_file(config_path));
    const std::pair<std::size_t, json> flag_values[] = {
        {0, data}, {1, variant}, {2, features}, {3, heads}, {4, guiding}, {5, self_attn}, {6, !no_anchor},
        {7, dropout}, {8, d_ff}, {9, lr}, {10, epochs}, {11, batch_size}, {12, max_len}, {13, seed}, {14, out}};
    const char* keys[] = {"data", "variant", "features", "heads", "guiding", "self_attn_ablation", "anchor",
                          "dropout", "d_ff", "lr", "epochs", "batch_size", "max_len", "seed", "out"};
    for (const auto& [i, v] : flag_values)
      if (given(i)) j[keys[i]] = v;
    return j;
  }
};

inline json dump_rows(const std::vector<SweepRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json row = r.metrics.to_json();
    row["iters"] = r.iterations;
    row["final_loss"] = r.final_loss;
    row["param_count"] = r.param_count;
    out.push_back(row);
  }
  return out;
}

inline int cmd_gen_data(const json& cfg_json, std::ostream& out, std::ostream& err, const std::string& started) {
  SceneConfig cfg;
  const std::size_t scenes = cfg_json.at("scenes").get<std::size_t>();
  cfg.n_features = cfg_json.at("n_features").get<std::size_t>();
  cfg.d_h = cfg_json.at("d_h").get<std::size_t>();
  cfg.seed = cfg_json.at("seed").get<std::uint64_t>();
  cfg.visual_noise_sigma = cfg_json.at("noise_visual").get<double>();
  cfg.concept_noise_sigma = cfg_json.at("noise_concept").get<double>();
  cfg.max_objects = std::min(cfg_json.at("max_objects").get<std::size_t>(), cfg.n_features);
  cfg.min_objects = std::min(cfg_json.at("min_objects").get<std::size_t>(), cfg.max_objects);
  const fs::path dir = cfg_json.at("out").get<std::string>();
  if (dir.empty()) throw ConfigError("--out is required");
  cfg.validate();

  err << "generating " << scenes << " scenes (" << cfg.n_features << " x " << cfg.d_h << ") into " << dir << "\n";
  const auto bundles = generate_scenes(cfg, scenes);
  const auto vocab = build_vocab(bundles);
  write_dataset(dir, bundles, vocab);
  write_manifest(dir, "gen-data", cfg_json, cfg.seed, started);
  json files = json::array();
  for (const auto& b : bundles) files.push_back(scene_filename(b.image_id));
  out << json{{"command", "gen-data"},
              {"out", dir.string()},
              {"scenes", scenes},
              {"vocab_size", vocab.size()},
              {"payload_bytes_per_file", 2 * cfg.n_features * cfg.d_h * 4},
              {"files", files}}
             .dump()
      << "\n";
  return ok;
}

inline int cmd_train(const json& cfg_json, const std::string& resume, std::ostream& out, std::ostream& err,
                     const std::string& started) {
  const std::string data_dir = cfg_json.at("data").get<std::string>();
  const fs::path run_dir = cfg_json.at("out").get<std::string>();
  if (data_dir.empty()) throw ConfigError("--data is required");
  if (run_dir.empty()) throw ConfigError("--out is required");
  TrainConfig cfg = TrainConfig::from_json(cfg_json);
  const auto data = load_dataset(data_dir);
  if (data.bundles.empty()) throw ConfigError("dataset '" + data_dir + "' holds no scenes");

  std::optional<Checkpoint> ckpt;
  if (!resume.empty()) ckpt = load_checkpoint(resume);
  err << "training " << variant_name(cfg.variant) << " on " << data.bundles.size() << " scenes, features="
      << feature_source_name(cfg.features) << ", epochs=" << cfg.epochs << "\n";
  auto result = train(cfg, data, ckpt ? &*ckpt : nullptr);

  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create '" + run_dir.string() + "': " + ec.message());
  save_checkpoint(run_dir / "checkpoint.miac", result.checkpoint);
  binio::write_text(run_dir / "loss.csv", loss_csv(result.loss_log));
  write_manifest(run_dir, "train", cfg_json, cfg.seed, started);

  std::size_t mia_params = 0;
  for (const auto& p : result.checkpoint.params)
    if (p.name.rfind("mia.", 0) == 0) mia_params += p.tensor.numel();
  out << json{{"command", "train"},
              {"out", run_dir.string()},
              {"checkpoint", (run_dir / "checkpoint.miac").string()},
              {"epochs", result.checkpoint.epochs_done},
              {"final_loss", result.loss_log.empty() ? 0.0 : result.loss_log.back()},
              {"token_accuracy", token_accuracy(result.model, data)},
              {"param_count", count_scalars(result.checkpoint.params)},
              {"mia_param_count", mia_params}}
             .dump()
      << "\n";
  return ok;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mutual iterative attention: data generation, training, evaluation and tracing", "mia"};
  app.require_subcommand(1);
  const std::string started = timestamp();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic feature dataset");
  std::string gen_config, gen_out;
  std::size_t scenes = 4, n_features = 49, d_h = 16, min_obj = 2, max_obj = 6;
  std::uint64_t gen_seed = 0;
  double noise_v = 0.1, noise_c = 0.1;
  gen->add_option("--config", gen_config, "JSON config file or run manifest");
  std::vector<std::pair<CLI::Option*, std::string>> gen_opts = {
      {gen->add_option("--out", gen_out, "output directory"), "out"},
      {gen->add_option("--scenes", scenes, "number of scenes"), "scenes"},
      {gen->add_option("--n-features", n_features, "rows per matrix (49 grid, 36 regions, or custom)"), "n_features"},
      {gen->add_option("--d-h", d_h, "feature width"), "d_h"},
      {gen->add_option("--seed", gen_seed, "random seed (falls back to MIA_SEED)"), "seed"},
      {gen->add_option("--noise-visual", noise_v, "visual noise sigma"), "noise_visual"},
      {gen->add_option("--noise-concept", noise_c, "concept noise sigma"), "noise_concept"},
      {gen->add_option("--min-objects", min_obj, "fewest objects per scene"), "min_objects"},
      {gen->add_option("--max-objects", max_obj, "most objects per scene"), "max_objects"},
  };

  auto* tr = app.add_subcommand("train", "train a captioner");
  TrainFlags train_flags;
  train_flags.add_to(tr);
  tr->add_option("--resume", train_flags.resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data;
  ev->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();

  auto* sw = app.add_subcommand("sweep-iters", "train once per MIA iteration count");
  TrainFlags sweep_flags;
  sweep_flags.add_to(sw);
  std::string iter_list = "1..5";
  bool parallel = false;
  sw->add_option("--iters", iter_list, "iteration counts, e.g. 1..5 or 1,2,4");
  sw->add_flag("--parallel", parallel, "run the trainings concurrently");

  auto* at = app.add_subcommand("attend", "export MIA attention traces for one bundle");
  std::string at_ckpt, at_bundle, at_out;
  at->add_option("--ckpt", at_ckpt, "checkpoint file")->required();
  at->add_option("--bundle", at_bundle, "feature file")->required();
  at->add_option("--out", at_out, "output directory")->required();

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
  std::uint64_t gc_seed = 0;
  gc->add_option("--seed", gc_seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    err << app.help();
    out << json{{"help", true}}.dump() << "\n";
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    out << json{{"error", e.what()}, {"exit_code", int(bad_args)}}.dump() << "\n";
    return bad_args;
  }

  auto fail = [&](int code, const std::string& msg) {
    err << "error: " << msg << "\n";
    out << json{{"error", msg}, {"exit_code", code}}.dump() << "\n";
    return code;
  };

  try {
    if (*gen) {
      json j{{"out", ""}, {"scenes", 4},     {"n_features", 49}, {"d_h", 16},         {"seed", env_seed().value_or(0)},
             {"noise_visual", 0.1}, {"noise_concept", 0.1}, {"min_objects", 2}, {"max_objects", 6}};
      j.update(load_config_file(gen_config));
      const json flag_values[] = {gen_out, scenes, n_features, d_h, gen_seed, noise_v, noise_c, min_obj, max_obj};
      for (std::size_t i = 0; i < gen_opts.size(); ++i)
        if (gen_opts[i].first->count() > 0) j[gen_opts[i].second] = flag_values[i];
      return cmd_gen_data(j, out, err, started);
    }
    if (*tr) return cmd_train(train_flags.resolve(), train_flags.resume, out, err, started);
    if (*ev) {
      const auto ckpt = load_checkpoint(eval_ckpt);
      const auto data = load_dataset(eval_data);
      const auto metrics = eval_run(ckpt, data);
      json j = metrics.to_json();
      j["command"] = "eval";
      out << j.dump() << "\n";
      return ok;
    }
    if (*sw) {
      const json cfg_json = sweep_flags.resolve();
      const auto counts = parse_iteration_list(iter_list);
      TrainConfig cfg = TrainConfig::from_json(cfg_json);
      if (!needs_mia(cfg.features)) throw ConfigError("sweep-iters needs an MIA feature source");
      const auto data_dir = cfg_json.at("data").get<std::string>();
      if (data_dir.empty()) throw ConfigError("--data is required");
      const auto data = load_dataset(data_dir);
      err << "sweeping iterations " << iter_list << " on " << data.bundles.size() << " scenes\n";
      const auto rows = sweep_iterations(cfg, data, counts, parallel);
      json result{{"command", "sweep-iters"}, {"rows", dump_rows(rows)}};
      const fs::path dir = cfg_json.at("out").get<std::string>();
      if (!dir.empty()) {
        fs::create_directories(dir);
        binio::write_text(dir / "sweep.csv", sweep_csv(rows));
        json manifest_cfg = cfg_json;
        manifest_cfg["iters_list"] = iter_list;
        write_manifest(dir, "sweep-iters", manifest_cfg, cfg.seed, started);
        result["csv"] = (dir / "sweep.csv").string();
      } else {
        result["csv_text"] = sweep_csv(rows);
      }
      out << result.dump() << "\n";
      return ok;
    }
    if (*at) {
      const auto ckpt = load_checkpoint(at_ckpt);
      if (!ckpt.has_mia()) throw ConfigError("checkpoint has no MIA parameters; train with an MIA feature source");
      const auto files = export_trace(model_from_checkpoint(ckpt), read_bundle(at_bundle), at_out);
      json names = json::array();
      for (const auto& f : files) names.push_back(f.string());
      out << json{{"command", "attend"}, {"files", names}}.dump() << "\n";
      return ok;
    }
    if (*gc) {
      err << "running gradient checks (seed " << gc_seed << ")\n";
      const auto report = grad_check_suite(gc_seed);
      json j = report.to_json();
      j["command"] = "grad-check";
      out << j.dump() << "\n";
      return report.all_pass() ? ok : check_failed;
    }
  } catch (const NumericError& e) {
    return fail(numeric_abort, e.what());
  } catch (const IoError& e) {
    return fail(io_failure, e.what());
  } catch (const FormatError& e) {
    return fail(io_failure, e.what());
  } catch (const Error& e) {
    return fail(bad_args, e.what());
  } catch (const json::exception& e) {
    return fail(bad_args, std::string("config: ") + e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(io_failure, e.what());
  }
  return bad_args;
}

} // namespace mia::cli
