#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "mia/error.hpp"

namespace mia {

using Sentence = std::vector<std::string>;

namespace detail {

inline std::map<Sentence, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<Sentence, std::size_t> counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sentence(s.begin() + i, s.begin() + i + n)];
  return counts;
}

} // namespace detail

/// Sentence BLEU with clipped n-gram precisions, uniform weights up to max_n,
/// and the brevity penalty against the closest reference length. A zero
/// precision is replaced by 1e-9 so the geometric mean stays defined.
inline double bleu(const std::vector<Sentence>& references, const Sentence& hypothesis, std::size_t max_n = 4) {
  if (max_n == 0) throw ContractError("bleu: max_n must be at least 1");
  if (hypothesis.empty() || references.empty()) return 0.0;
  constexpr double zero_precision = 1e-9;

  // Orders longer than the hypothesis have no n-grams and are left out of the mean.
  const std::size_t orders = std::min(max_n, hypothesis.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto hyp = detail::ngram_counts(hypothesis, n);
    std::map<Sentence, std::size_t> max_ref;
    for (const auto& r : references)
      for (const auto& [g, c] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    std::size_t clipped = 0, total = 0;
    for (const auto& [g, c] : hyp) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    const double p = clipped == 0 ? zero_precision : static_cast<double>(clipped) / static_cast<double>(total);
    log_sum += std::log(p);
  }

  const double c = static_cast<double>(hypothesis.size());
  std::size_t closest = references.front().size();
  for (const auto& r : references) {
    const auto diff = std::abs(static_cast<long>(r.size()) - static_cast<long>(hypothesis.size()));
    const auto best = std::abs(static_cast<long>(closest) - static_cast<long>(hypothesis.size()));
    if (diff < best || (diff == best && r.size() < closest)) closest = r.size();
  }
  const double r = static_cast<double>(closest);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

} // namespace mia
