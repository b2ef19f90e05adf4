#pragma once

// Bag-of-n-gram features over token sequences.

#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/corpus.hpp"
#include "multistyle/error.hpp"
#include "multistyle/math.hpp"

namespace multistyle {

struct FeatureSpec {
  int vocab_size = 64;
  std::vector<int> ngram_orders = {1};
  bool normalize = true;

  // Sum over orders of vocab_size^order.
  std::size_t feature_length() const {
    std::size_t n = 0;
    for (int order : ngram_orders) {
      std::size_t block = 1;
      for (int i = 0; i < order; ++i) block *= static_cast<std::size_t>(vocab_size);
      n += block;
    }
    return n;
  }

  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

using FeatureVector = Vector;

inline void validate(const FeatureSpec& spec) {
  detail::require(spec.vocab_size >= 1, "FeatureSpec: vocab_size must be >= 1");
  detail::require(!spec.ngram_orders.empty(), "FeatureSpec: at least one n-gram order is required");
  for (int o : spec.ngram_orders) detail::require(o >= 1, "FeatureSpec: n-gram orders must be >= 1");
}

// Counts of every configured n-gram order, concatenated in order. With
// `normalize`, the whole vector is scaled to unit L1 norm; an empty sequence
// gives the zero vector.
inline FeatureVector extract(std::span<const Token> seq, const FeatureSpec& spec) {
  validate(spec);
  for (Token t : seq) {
    if (t < 0 || t >= spec.vocab_size) {
      throw ValidationError("extract: token " + std::to_string(t) + " is out of vocabulary");
    }
  }
  FeatureVector out(spec.feature_length(), 0.0);
  std::size_t offset = 0;
  double total = 0.0;
  const auto v = static_cast<std::size_t>(spec.vocab_size);
  for (int order : spec.ngram_orders) {
    std::size_t block = 1;
    for (int i = 0; i < order; ++i) block *= v;
    const auto o = static_cast<std::size_t>(order);
    for (std::size_t start = 0; start + o <= seq.size(); ++start) {
      std::size_t idx = 0;
      for (std::size_t i = 0; i < o; ++i) idx = idx * v + static_cast<std::size_t>(seq[start + i]);
      out[offset + idx] += 1.0;
      total += 1.0;
    }
    offset += block;
  }
  if (spec.normalize && total > 0.0) {
    for (double& x : out) x /= total;
  }
  return out;
}

inline nlohmann::json to_json(const FeatureSpec& s) {
  return {{"vocab_size", s.vocab_size}, {"ngram_orders", s.ngram_orders}, {"normalize", s.normalize}};
}

inline FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
  FeatureSpec s;
  s.vocab_size = j.at("vocab_size").get<int>();
  s.ngram_orders = j.at("ngram_orders").get<std::vector<int>>();
  s.normalize = j.at("normalize").get<bool>();
  validate(s);
  return s;
}

}  // namespace multistyle
