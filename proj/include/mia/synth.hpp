#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mia/binio.hpp"
#include "mia/rng.hpp"
#include "mia/tensor.hpp"
#include "mia/vocab.hpp"

namespace mia {

// Word lists the synthetic scenes draw from.
struct Lexicon {
  std::vector<std::string> objects{"dog", "cat", "bike", "car", "woman", "man",
                                   "girl", "ball", "table", "tree", "horse", "bird"};
  std::vector<std::string> attributes{"young", "black", "white", "red", "small", "large", "brown"};
  std::vector<std::string> relations{"sitting", "holding", "riding", "near", "under", "beside", "watching"};
  std::string article = "a";
};

struct SceneConfig {
  std::size_t n_features = 49;
  std::size_t min_objects = 2;
  std::size_t max_objects = 6;
  std::size_t d_h = 16;
  double visual_noise_sigma = 0.1;
  double concept_noise_sigma = 0.1;
  std::uint64_t seed = 0;
  // Seeds the per-word prototypes shared by every scene of a dataset.
  std::uint64_t world_seed = 0x4d4941;
  Lexicon lexicon;

  void validate() const {
    if (n_features == 0) throw ConfigError("scene needs at least one feature row");
    if (d_h < 2) throw ConfigError("feature width must be at least 2");
    if (min_objects == 0 || min_objects > max_objects)
      throw ConfigError("object count range must satisfy 1 <= min <= max");
    if (max_objects > n_features)
      throw ConfigError("object count " + std::to_string(max_objects) + " exceeds feature count " +
                        std::to_string(n_features));
    if (max_objects > lexicon.objects.size())
      throw ConfigError("vocabulary too small: " + std::to_string(lexicon.objects.size()) +
                        " object words for up to " + std::to_string(max_objects) + " objects");
    if (lexicon.attributes.empty() || lexicon.relations.empty())
      throw ConfigError("vocabulary needs attribute and relation words");
    if (visual_noise_sigma < 0.0 || concept_noise_sigma < 0.0) throw ConfigError("noise sigmas must be >= 0");
  }
};

/// One image's visual features, textual concepts and captions.
struct FeatureBundle {
  std::uint64_t image_id = 0;
  Tensor visual;   // n x d_h
  Tensor concepts; // n x d_h
  std::vector<std::string> concept_tokens;
  std::vector<std::vector<std::string>> captions;
  std::vector<std::size_t> planted_assignment; // feature row -> object index; empty for real data

  std::size_t rows() const { return visual.rows(); }
  std::size_t width() const { return visual.cols(); }
};

namespace detail {

inline Tensor gaussian_rows(std::size_t rows, std::size_t d, Rng& rng) {
  Tensor t({rows, d});
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

} // namespace detail

// Fixed visual prototypes and word embeddings for every lexicon word.
struct World {
  Tensor object_latent;    // objects x d
  Tensor attribute_latent; // attributes x d
  Tensor word_embedding;   // all lexicon words x d, indexed by word_index()
  std::vector<std::string> words;

  static World build(const SceneConfig& cfg) {
    Rng rng(cfg.world_seed);
    World w;
    const auto& lx = cfg.lexicon;
    w.object_latent = detail::gaussian_rows(lx.objects.size(), cfg.d_h, rng);
    w.attribute_latent = detail::gaussian_rows(lx.attributes.size(), cfg.d_h, rng);
    w.words = lx.objects;
    w.words.insert(w.words.end(), lx.attributes.begin(), lx.attributes.end());
    w.words.insert(w.words.end(), lx.relations.begin(), lx.relations.end());
    w.word_embedding = detail::gaussian_rows(w.words.size(), cfg.d_h, rng);
    return w;
  }

  std::size_t word_index(const std::string& word) const {
    auto it = std::find(words.begin(), words.end(), word);
    if (it == words.end()) throw ContractError("word '" + word + "' is not in the lexicon");
    return static_cast<std::size_t>(it - words.begin());
  }
};

/// Samples a scene with a planted region-to-object alignment.
///
/// Each visual row is its object's latent (object prototype plus half its
/// attribute prototype) plus Gaussian noise; each concept row is the word
/// embedding of its token plus noise. Concepts list nouns by region count,
/// then their attributes, then the relation, repeated to fill n rows.
inline FeatureBundle generate_scene(const SceneConfig& cfg, const World& world, std::uint64_t image_id, Rng& rng) {
  cfg.validate();
  const auto& lx = cfg.lexicon;
  const std::size_t n = cfg.n_features, d = cfg.d_h;
  const std::size_t n_obj = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);

  std::vector<std::size_t> nouns(lx.objects.size());
  std::iota(nouns.begin(), nouns.end(), std::size_t{0});
  for (std::size_t i = 0; i < n_obj; ++i) std::swap(nouns[i], nouns[i + rng.below(nouns.size() - i)]);
  nouns.resize(n_obj);
  std::vector<std::size_t> attrs(n_obj);
  for (auto& a : attrs) a = rng.below(lx.attributes.size());
  const std::size_t relation = rng.below(lx.relations.size());

  // Every object owns at least one region; the remaining regions are random.
  std::vector<std::size_t> assignment(n);
  for (std::size_t i = 0; i < n; ++i) assignment[i] = i < n_obj ? i : rng.below(n_obj);
  for (std::size_t i = n; i > 1; --i) std::swap(assignment[i - 1], assignment[rng.below(i)]);

  std::vector<std::size_t> counts(n_obj, 0);
  for (auto a : assignment) ++counts[a];
  std::vector<std::size_t> by_freq(n_obj);
  std::iota(by_freq.begin(), by_freq.end(), std::size_t{0});
  std::stable_sort(by_freq.begin(), by_freq.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });

  FeatureBundle b;
  b.image_id = image_id;
  b.planted_assignment = assignment;

  b.visual = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = assignment[i];
    for (std::size_t j = 0; j < d; ++j)
      b.visual.at(i, j) = world.object_latent.at(nouns[o], j) + 0.5 * world.attribute_latent.at(attrs[o], j) +
                          rng.normal(0.0, cfg.visual_noise_sigma);
  }

  std::vector<std::string> distinct;
  for (auto o : by_freq) distinct.push_back(lx.objects[nouns[o]]);
  for (auto o : by_freq) {
    const auto& a = lx.attributes[attrs[o]];
    if (std::find(distinct.begin(), distinct.end(), a) == distinct.end()) distinct.push_back(a);
  }
  distinct.push_back(lx.relations[relation]);
  for (std::size_t i = 0; i < n; ++i) b.concept_tokens.push_back(distinct[i % distinct.size()]);

  b.concepts = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t w = world.word_index(b.concept_tokens[i]);
    for (std::size_t j = 0; j < d; ++j)
      b.concepts.at(i, j) = world.word_embedding.at(w, j) + rng.normal(0.0, cfg.concept_noise_sigma);
  }

  const std::size_t first = by_freq[0];
  const std::size_t second = n_obj > 1 ? by_freq[1] : by_freq[0];
  b.captions.push_back({lx.article, lx.attributes[attrs[first]], lx.objects[nouns[first]],
                        lx.relations[relation], lx.article, lx.objects[nouns[second]]});
  return b;
}

inline FeatureBundle generate_scene(const SceneConfig& cfg, std::uint64_t image_id, Rng& rng) {
  return generate_scene(cfg, World::build(cfg), image_id, rng);
}

/// Scenes 0..count-1, each seeded with cfg.seed ^ image_id.
inline std::vector<FeatureBundle> generate_scenes(const SceneConfig& cfg, std::size_t count) {
  const World world = World::build(cfg);
  std::vector<FeatureBundle> out;
  out.reserve(count);
  for (std::size_t id = 0; id < count; ++id) {
    Rng rng(cfg.seed ^ id);
    out.push_back(generate_scene(cfg, world, id, rng));
  }
  return out;
}

inline Vocabulary build_vocab(const std::vector<FeatureBundle>& bundles) {
  std::vector<std::string> words;
  for (const auto& b : bundles) {
    words.insert(words.end(), b.concept_tokens.begin(), b.concept_tokens.end());
    for (const auto& c : b.captions) words.insert(words.end(), c.begin(), c.end());
  }
  return Vocabulary::from_words(words);
}

// ---------------------------------------------------------------------------
// Feature file: "MIAF" | u16 version | u32 n | u32 d_h | f32 I[n*d_h] |
// f32 T[n*d_h] | u32 json length | json metadata. All little-endian.

inline constexpr std::string_view feature_magic = "MIAF";
inline constexpr std::uint16_t feature_version = 1;
inline constexpr std::size_t feature_header_size = 14;

inline std::vector<std::uint8_t> encode_bundle(const FeatureBundle& b) {
  if (b.visual.rows() != b.concepts.rows() || b.visual.cols() != b.concepts.cols())
    throw AlignmentError("bundle matrices disagree: " + shape_str(b.visual.shape()) + " vs " +
                         shape_str(b.concepts.shape()));
  binio::Writer w;
  w.bytes(feature_magic);
  w.u16(feature_version);
  w.u32(static_cast<std::uint32_t>(b.rows()));
  w.u32(static_cast<std::uint32_t>(b.width()));
  for (double v : b.visual.data()) w.f32(static_cast<float>(v));
  for (double v : b.concepts.data()) w.f32(static_cast<float>(v));
  nlohmann::json meta{{"image_id", b.image_id},
                      {"concept_tokens", b.concept_tokens},
                      {"captions", b.captions},
                      {"planted_assignment", b.planted_assignment}};
  const std::string js = meta.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.bytes(js);
  return w.buffer();
}

inline FeatureBundle decode_bundle(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < feature_header_size)
    throw FormatError("feature file too short for a header (" + std::to_string(bytes.size()) + " bytes)");
  binio::Reader r(bytes);
  if (r.bytes(4) != feature_magic) throw FormatError("bad magic: not a feature file");
  const std::uint16_t version = r.u16();
  if (version != feature_version)
    throw VersionError("unsupported feature file version " + std::to_string(version));
  const std::uint64_t n = r.u32();
  const std::uint64_t d = r.u32();
  if (n == 0 || d == 0) throw FormatError("feature file declares an empty matrix");
  // Checked by division so corrupt sizes cannot overflow.
  if (n > r.remaining() / 8 / d)
    throw TruncatedError("feature payload truncated: header declares " + std::to_string(n) + " x " +
                         std::to_string(d) + " matrices, only " + std::to_string(r.remaining()) +
                         " bytes follow");
  FeatureBundle b;
  b.visual = Tensor({n, d});
  b.concepts = Tensor({n, d});
  for (auto& v : b.visual.data()) v = r.f32();
  for (auto& v : b.concepts.data()) v = r.f32();
  const std::uint32_t js_len = r.u32();
  if (js_len > r.remaining())
    throw TruncatedError("metadata block truncated: declares " + std::to_string(js_len) + " bytes, " +
                         std::to_string(r.remaining()) + " available");
  if (js_len < r.remaining()) throw FormatError("trailing bytes after metadata block");
  try {
    const auto meta = nlohmann::json::parse(r.bytes(js_len));
    b.image_id = meta.at("image_id").get<std::uint64_t>();
    b.concept_tokens = meta.at("concept_tokens").get<std::vector<std::string>>();
    b.captions = meta.at("captions").get<std::vector<std::vector<std::string>>>();
    b.planted_assignment = meta.at("planted_assignment").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feature metadata: ") + e.what());
  }
  if (b.concept_tokens.size() != n)
    throw FormatError("feature metadata lists " + std::to_string(b.concept_tokens.size()) +
                      " concept tokens for " + std::to_string(n) + " rows");
  if (!b.planted_assignment.empty() && b.planted_assignment.size() != n)
    throw FormatError("planted assignment length does not match row count");
  if (b.captions.empty()) throw FormatError("feature metadata has no captions");
  return b;
}

inline void write_bundle(const std::filesystem::path& path, const FeatureBundle& b) {
  binio::write_file(path, encode_bundle(b));
}

inline FeatureBundle read_bundle(const std::filesystem::path& path) {
  return decode_bundle(binio::read_file(path));
}

// ---------------------------------------------------------------------------
// Dataset directory: scene_NNNNN.miaf files, vocab.json, captions.json.

struct Dataset {
  Vocabulary vocab;
  std::vector<FeatureBundle> bundles;
};

inline std::string scene_filename(std::uint64_t image_id) {
  std::ostringstream os;
  os << "scene_" << std::setw(5) << std::setfill('0') << image_id << ".miaf";
  return os.str();
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<FeatureBundle>& bundles,
                          const Vocabulary& vocab) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json captions = nlohmann::json::object();
  for (const auto& b : bundles) {
    write_bundle(dir / scene_filename(b.image_id), b);
    captions[std::to_string(b.image_id)] = b.captions;
  }
  binio::write_text(dir / "vocab.json", vocab.to_json().dump(2) + "\n");
  binio::write_text(dir / "captions.json", captions.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' not found");
  Dataset ds;
  try {
    ds.vocab = Vocabulary::from_json(nlohmann::json::parse(binio::read_text(dir / "vocab.json")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vocab.json: ") + e.what());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".miaf") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) ds.bundles.push_back(read_bundle(f));
  return ds;
}

} // namespace mia
