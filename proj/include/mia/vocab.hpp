#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mia/error.hpp"

namespace mia {

// Token <-> id bijection. Ids 0-3 are reserved; the rest are assigned in
// lexicographic order so identical corpora always map identically.
class Vocabulary {
public:
  static constexpr std::size_t pad = 0;
  static constexpr std::size_t bos = 1;
  static constexpr std::size_t eos = 2;
  static constexpr std::size_t unk = 3;
  static constexpr std::size_t reserved_count = 4;

  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} { reindex(); }

  template <class Range>
  static Vocabulary from_words(const Range& words) {
    std::set<std::string> uniq;
    Vocabulary v;
    for (const auto& w : words)
      if (!v.index_.contains(w)) uniq.insert(w);
    v.tokens_.insert(v.tokens_.end(), uniq.begin(), uniq.end());
    v.reindex();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  bool contains(const std::string& token) const { return index_.contains(token); }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk : it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[id];
  }

  std::vector<std::size_t> encode(const std::vector<std::string>& words) const {
    std::vector<std::size_t> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (auto i : ids) words.push_back(token(i));
    return words;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const { return nlohmann::json{{"tokens", tokens_}}; }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    std::vector<std::string> toks;
    try {
      toks = j.at("tokens").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("vocabulary json: ") + e.what());
    }
    if (toks.size() < reserved_count || !std::equal(v.tokens_.begin(), v.tokens_.end(), toks.begin()))
      throw FormatError("vocabulary json: reserved tokens missing or out of place");
    v.tokens_ = std::move(toks);
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw FormatError("vocabulary json: duplicate tokens");
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

} // namespace mia
