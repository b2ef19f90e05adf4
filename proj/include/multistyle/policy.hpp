#pragma once

// Tabular order-K autoregressive policy over a small vocabulary.
//
// Contexts are the last K tokens, left-padded with a BOS symbol that is never
// generated. The table holds one row of next-token logits per context.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/corpus.hpp"
#include "multistyle/error.hpp"
#include "multistyle/math.hpp"
#include "multistyle/rng.hpp"

namespace multistyle {

struct ContextTable {
  int vocab_size = 0;
  int order = 2;

  // Size of the context alphabet: vocabulary plus BOS.
  std::size_t alphabet() const { return static_cast<std::size_t>(vocab_size) + 1; }
  std::size_t bos() const { return static_cast<std::size_t>(vocab_size); }

  std::size_t num_contexts() const {
    std::size_t n = 1;
    for (int i = 0; i < order; ++i) n *= alphabet();
    return n;
  }

  // Context index for predicting the token that follows `history`.
  std::size_t context_index(std::span<const Token> history) const {
    std::size_t idx = 0;
    for (int i = order; i >= 1; --i) {
      const auto back = static_cast<std::size_t>(i);
      std::size_t sym = bos();
      if (history.size() >= back) {
        const Token t = history[history.size() - back];
        if (t < 0 || t >= vocab_size) throw ValidationError("context: token " + std::to_string(t) + " is out of vocabulary");
        sym = static_cast<std::size_t>(t);
      }
      idx = idx * alphabet() + sym;
    }
    return idx;
  }
};

struct TabularPolicy {
  ContextTable shape;
  Vector logits;  // num_contexts x vocab_size, row-major
  std::uint64_t version = 0;

  static TabularPolicy zeros(int vocab_size, int order = 2) {
    detail::require(vocab_size >= 2, "TabularPolicy: vocab_size must be >= 2");
    detail::require(order >= 1, "TabularPolicy: order must be >= 1");
    TabularPolicy p;
    p.shape = {vocab_size, order};
    p.logits.assign(p.shape.num_contexts() * static_cast<std::size_t>(vocab_size), 0.0);
    return p;
  }

  int vocab_size() const { return shape.vocab_size; }

  std::span<const double> row(std::size_t context) const {
    return {logits.data() + context * static_cast<std::size_t>(shape.vocab_size), static_cast<std::size_t>(shape.vocab_size)};
  }
  std::span<double> row(std::size_t context) {
    return {logits.data() + context * static_cast<std::size_t>(shape.vocab_size), static_cast<std::size_t>(shape.vocab_size)};
  }
};

// Critic indexed by the same contexts as the policy.
struct ValueTable {
  ContextTable shape;
  Vector values;

  static ValueTable zeros(int vocab_size, int order = 2) {
    ValueTable v;
    v.shape = {vocab_size, order};
    v.values.assign(v.shape.num_contexts(), 0.0);
    return v;
  }
};

struct Rollout {
  TokenSeq prompt;
  TokenSeq generated;
  std::string source;
  std::vector<double> logprobs_policy;
  std::vector<double> logprobs_ref;
  double terminal_reward = 0.0;
  std::vector<double> per_token_rewards;
  std::vector<double> advantages;
  std::vector<double> returns;
};

inline Vector next_logits(const TabularPolicy& p, std::span<const Token> history) {
  const auto r = p.row(p.shape.context_index(history));
  return Vector(r.begin(), r.end());
}

// Context indices for each generated position.
inline std::vector<std::size_t> rollout_contexts(const ContextTable& shape, std::span<const Token> prompt,
                                                 std::span<const Token> generated) {
  TokenSeq full(prompt.begin(), prompt.end());
  full.insert(full.end(), generated.begin(), generated.end());
  std::vector<std::size_t> out;
  out.reserve(generated.size());
  for (std::size_t t = 0; t < generated.size(); ++t) {
    out.push_back(shape.context_index(std::span<const Token>(full.data(), prompt.size() + t)));
  }
  return out;
}

// Ancestral sampling of exactly `max_len` tokens; the vocabulary has no EOS.
inline Rollout sample(const TabularPolicy& p, std::span<const Token> prompt, int max_len, std::uint64_t seed) {
  detail::require(max_len >= 1, "sample: max_len must be >= 1");
  Rng rng(seed);
  Rollout r;
  r.prompt.assign(prompt.begin(), prompt.end());
  TokenSeq history = r.prompt;
  r.generated.reserve(static_cast<std::size_t>(max_len));
  r.logprobs_policy.reserve(static_cast<std::size_t>(max_len));
  for (int t = 0; t < max_len; ++t) {
    const auto row = p.row(p.shape.context_index(history));
    const Vector lp = log_softmax(row);
    const Vector probs = softmax(row);
    const auto a = sample_categorical(probs, uniform01(rng));
    r.generated.push_back(static_cast<Token>(a));
    r.logprobs_policy.push_back(lp[a]);
    history.push_back(static_cast<Token>(a));
  }
  return r;
}

// Exact per-token log-probabilities of `generated` after `prompt`.
inline std::vector<double> logprob(const TabularPolicy& p, std::span<const Token> prompt,
                                   std::span<const Token> generated) {
  for (Token t : generated) {
    if (t < 0 || t >= p.vocab_size()) throw ValidationError("logprob: token " + std::to_string(t) + " is out of vocabulary");
  }
  const auto contexts = rollout_contexts(p.shape, prompt, generated);
  std::vector<double> out(generated.size());
  for (std::size_t t = 0; t < generated.size(); ++t) {
    out[t] = log_softmax(p.row(contexts[t]))[static_cast<std::size_t>(generated[t])];
  }
  return out;
}

// exp of the negative mean per-token log-probability of the generated tokens.
inline double seq_perplexity(const TabularPolicy& ref, std::span<const Token> prompt, std::span<const Token> generated) {
  detail::require(!generated.empty(), "seq_perplexity: generated sequence must be nonempty");
  const auto lp = logprob(ref, prompt, generated);
  return std::exp(-mean(lp));
}

// Gradient of log pi(a | context) w.r.t. the context's logit row:
// onehot(a) - softmax(row). Every other row has zero gradient.
inline Vector logprob_row_gradient(const TabularPolicy& p, std::size_t context, Token a) {
  Vector g = softmax(p.row(context));
  for (double& x : g) x = -x;
  g[static_cast<std::size_t>(a)] += 1.0;
  return g;
}

struct LmTrainConfig {
  double smoothing = 0.1;
};

// Add-lambda smoothed maximum likelihood: logits = log((c + lambda) / (n + lambda V)).
inline TabularPolicy train_lm(TabularPolicy p, const std::vector<LabeledSequence>& corpus, const LmTrainConfig& cfg = {}) {
  detail::require(!corpus.empty(), "train_lm: corpus must be nonempty");
  detail::require(cfg.smoothing > 0.0, "train_lm: smoothing must be > 0");
  const auto v = static_cast<std::size_t>(p.vocab_size());
  Vector counts(p.logits.size(), 0.0);
  for (const auto& seq : corpus) {
    const auto ctx = rollout_contexts(p.shape, {}, seq.tokens);
    for (std::size_t t = 0; t < seq.tokens.size(); ++t) counts[ctx[t] * v + static_cast<std::size_t>(seq.tokens[t])] += 1.0;
  }
  const double lam = cfg.smoothing;
  for (std::size_t c = 0; c < p.shape.num_contexts(); ++c) {
    double n = 0.0;
    for (std::size_t a = 0; a < v; ++a) n += counts[c * v + a];
    for (std::size_t a = 0; a < v; ++a) {
      p.logits[c * v + a] = std::log((counts[c * v + a] + lam) / (n + lam * static_cast<double>(v)));
    }
  }
  ++p.version;
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const TabularPolicy& p) {
  return {{"format", "multistyle.tabular_policy"},
          {"version", 1},
          {"vocab_size", p.shape.vocab_size},
          {"order", p.shape.order},
          {"shape", {p.shape.num_contexts(), p.shape.vocab_size}},
          {"table_version", p.version},
          {"logits", p.logits}};
}

inline TabularPolicy policy_from_json(const nlohmann::json& j) {
  detail::require(j.value("format", "") == "multistyle.tabular_policy", "policy checkpoint: unexpected format tag");
  detail::require(j.at("version").get<int>() == 1, "policy checkpoint: unsupported version");
  auto p = TabularPolicy::zeros(j.at("vocab_size").get<int>(), j.at("order").get<int>());
  auto logits = j.at("logits").get<Vector>();
  detail::require_dims(logits.size() == p.logits.size(), "policy checkpoint: logits size mismatch");
  detail::require(all_finite(logits), "policy checkpoint: logits must be finite");
  p.logits = std::move(logits);
  p.version = j.value("table_version", std::uint64_t{0});
  return p;
}

inline nlohmann::json to_json(const ValueTable& v) {
  return {{"format", "multistyle.value_table"},
          {"version", 1},
          {"vocab_size", v.shape.vocab_size},
          {"order", v.shape.order},
          {"shape", {v.shape.num_contexts()}},
          {"values", v.values}};
}

inline ValueTable value_table_from_json(const nlohmann::json& j) {
  detail::require(j.value("format", "") == "multistyle.value_table", "value checkpoint: unexpected format tag");
  auto v = ValueTable::zeros(j.at("vocab_size").get<int>(), j.at("order").get<int>());
  auto values = j.at("values").get<Vector>();
  detail::require_dims(values.size() == v.values.size(), "value checkpoint: size mismatch");
  v.values = std::move(values);
  return v;
}

}  // namespace multistyle
