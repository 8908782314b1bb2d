#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mia/binio.hpp"
#include "mia/model.hpp"

namespace mia {

/// Everything needed to resume a run bit-exactly.
///
/// Layout (little-endian): "MIAC" | u16 version | u32 json length | json
/// {config, vocab} | u32 tensor count | per tensor: u32 name length, name,
/// u8 rank, u32 dims[rank], f64 data | u64 adam step | u8 has moments |
/// per tensor f64 m, f64 v | u64 rng[4] | u64 epochs done | u32 log length |
/// f64 loss per epoch.
struct Checkpoint {
  TrainConfig config;
  Vocabulary vocab;
  ParamList params;
  AdamState adam;
  Rng::State rng{};
  std::uint64_t epochs_done = 0;
  std::vector<double> loss_log;

  bool has_mia() const {
    for (const auto& p : params)
      if (p.name.rfind("mia.", 0) == 0) return true;
    return false;
  }
};

inline constexpr std::string_view checkpoint_magic = "MIAC";
inline constexpr std::uint16_t checkpoint_version = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  binio::Writer w;
  w.bytes(checkpoint_magic);
  w.u16(checkpoint_version);
  const std::string js = nlohmann::json{{"config", c.config.to_json()}, {"vocab", c.vocab.to_json()}}.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.bytes(js);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    w.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.data()) w.f64(v);
  }
  w.u64(c.adam.step);
  const bool moments = !c.adam.m.empty();
  w.u8(moments ? 1 : 0);
  if (moments) {
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      for (double v : c.adam.m[i]) w.f64(v);
      for (double v : c.adam.v[i]) w.f64(v);
    }
  }
  for (auto s : c.rng) w.u64(s);
  w.u64(c.epochs_done);
  w.u32(static_cast<std::uint32_t>(c.loss_log.size()));
  for (double v : c.loss_log) w.f64(v);
  return w.buffer();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10) throw FormatError("checkpoint too short (" + std::to_string(bytes.size()) + " bytes)");
  binio::Reader r(bytes);
  if (r.bytes(4) != checkpoint_magic) throw FormatError("bad magic: not a checkpoint");
  const auto version = r.u16();
  if (version != checkpoint_version) throw VersionError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint c;
  const std::uint32_t js_len = r.u32();
  r.need(js_len);
  try {
    const auto meta = nlohmann::json::parse(r.bytes(js_len));
    c.config = TrainConfig::from_json(meta.at("config"));
    c.vocab = Vocabulary::from_json(meta.at("vocab"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }

  const std::uint32_t count = r.u32();
  // Each record needs at least 5 bytes; reject absurd counts before allocating.
  if (count > r.remaining() / 5) throw TruncatedError("checkpoint declares more tensors than the file holds");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    const std::uint8_t rank = r.u8();
    if (rank == 0 || rank > 3) throw FormatError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32();
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      shape.push_back(d);
      numel *= d;
      if (numel > r.remaining() / 8) throw TruncatedError("tensor '" + name + "' data truncated");
    }
    Tensor t(shape, 0.0, true);
    for (auto& v : t.data()) v = r.f64();
    c.params.push_back({std::move(name), std::move(t)});
  }
  c.adam.step = r.u64();
  const std::uint8_t moments = r.u8();
  if (moments > 1) throw FormatError("invalid optimizer flag");
  if (moments) {
    for (const auto& p : c.params) {
      r.need(16 * p.tensor.numel());
      std::vector<double> m(p.tensor.numel()), v(p.tensor.numel());
      for (auto& x : m) x = r.f64();
      for (auto& x : v) x = r.f64();
      c.adam.m.push_back(std::move(m));
      c.adam.v.push_back(std::move(v));
    }
  }
  for (auto& s : c.rng) s = r.u64();
  c.epochs_done = r.u64();
  const std::uint32_t log_len = r.u32();
  if (log_len > r.remaining() / 8) throw TruncatedError("loss log truncated");
  for (std::uint32_t i = 0; i < log_len; ++i) c.loss_log.push_back(r.f64());
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  binio::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path));
}

/// Rebuilds a model from a checkpoint, matching every tensor by name and shape.
inline CaptionModel model_from_checkpoint(const Checkpoint& c) {
  Rng scratch(0);
  CaptionModel m = CaptionModel::init(c.config, c.vocab, scratch);
  auto params = m.params();
  if (params.size() != c.params.size())
    throw FormatError("checkpoint holds " + std::to_string(c.params.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = c.params[i];
    auto& dst = params[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape())
      throw FormatError("checkpoint tensor '" + src.name + "' " + shape_str(src.tensor.shape()) +
                        " does not match model tensor '" + dst.name + "' " + shape_str(dst.tensor.shape()));
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.tensor.data().begin());
  }
  return m;
}

} // namespace mia
