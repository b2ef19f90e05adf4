#pragma once

// Multi-discriminator reward formulations.
//
// Every formulation produces one term per discriminator plus one weight per
// discriminator; the scalar reward is always their dot product (`combine`).
// Static formulations weight by alpha (uniform by default); dynamic weighting
// uses signed normalized cross-entropy gradient norms.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/corpus.hpp"
#include "multistyle/discriminator.hpp"
#include "multistyle/error.hpp"
#include "multistyle/math.hpp"

namespace multistyle {

enum class Formulation { logits, softmax, calibrated_softmax, calibrated_logits, binarized, dynamic };

inline constexpr Formulation kAllFormulations[] = {Formulation::logits,           Formulation::softmax,
                                                   Formulation::calibrated_softmax, Formulation::calibrated_logits,
                                                   Formulation::binarized,        Formulation::dynamic};

inline std::string_view to_string(Formulation f) {
  switch (f) {
    case Formulation::logits: return "logits";
    case Formulation::softmax: return "softmax";
    case Formulation::calibrated_softmax: return "calibrated_softmax";
    case Formulation::calibrated_logits: return "calibrated_logits";
    case Formulation::binarized: return "binarized";
    case Formulation::dynamic: return "dynamic";
  }
  return "unknown";
}

inline Formulation parse_formulation(std::string_view name) {
  for (Formulation f : kAllFormulations)
    if (to_string(f) == name) return f;
  throw ValidationError("unknown reward formulation '" + std::string(name) + "'");
}

inline bool is_calibrated(Formulation f) {
  return f == Formulation::calibrated_softmax || f == Formulation::calibrated_logits;
}

enum class GradNorm { l2, l1 };

struct RewardConfig {
  Formulation formulation = Formulation::dynamic;
  // Convex weights; empty means 1/n each.
  std::vector<double> alphas;
  // Per-discriminator temperatures; required by the calibrated formulations.
  std::vector<double> temperatures;
  // Weight each term by 1 instead of alpha (the plain sums of the textual
  // definitions). Ignored by the dynamic formulation.
  bool raw_sum = false;
  // Replace alpha by unsigned gradient-norm weights for a static formulation.
  bool grad_weighted = false;
  GradNorm norm = GradNorm::l2;
};

struct RewardBreakdown {
  std::vector<double> terms;
  std::vector<double> weights;
  double total = 0.0;
};

// Dot product of terms and weights; shared by every formulation.
inline double combine(std::span<const double> terms, std::span<const double> weights) {
  detail::require_dims(terms.size() == weights.size(), "combine: terms and weights differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += terms[i] * weights[i];
  return s;
}

namespace detail {

inline void check_inputs(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets) {
  require_dims(logit_sets.size() == targets.size(), "reward: need exactly one logit set per target");
  require(!targets.empty(), "reward: at least one discriminator is required");
  for (std::size_t i = 0; i < targets.size(); ++i) check_class(logit_sets[i], targets[i].target_class, "reward");
}

inline std::vector<double> static_weights(const RewardConfig& cfg, std::size_t n) {
  if (cfg.raw_sum) return std::vector<double>(n, 1.0);
  if (cfg.alphas.empty()) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  require_dims(cfg.alphas.size() == n, "RewardConfig: need one alpha per discriminator");
  double s = 0.0;
  for (double a : cfg.alphas) {
    require(a >= 0.0, "RewardConfig: alphas must be >= 0");
    s += a;
  }
  require(std::abs(s - 1.0) < 1e-9, "RewardConfig: alphas must sum to 1");
  return cfg.alphas;
}

inline double target_prob(std::span<const double> logits, int k) {
  return softmax(logits)[static_cast<std::size_t>(k)];
}

inline std::vector<double> terms_for(Formulation f, std::span<const Logits> logit_sets,
                                     std::span<const StyleTarget> targets, const RewardConfig& cfg) {
  const std::size_t n = targets.size();
  std::vector<double> terms(n);
  if (is_calibrated(f)) {
    require_dims(cfg.temperatures.size() == n, "reward: calibrated formulation needs one temperature per discriminator");
    for (double t : cfg.temperatures) require(t > 0.0, "RewardConfig: temperatures must be > 0");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = logit_sets[i];
    const int k = targets[i].target_class;
    const auto ks = static_cast<std::size_t>(k);
    switch (f) {
      case Formulation::logits: terms[i] = l[ks]; break;
      case Formulation::softmax: terms[i] = target_prob(l, k); break;
      case Formulation::calibrated_logits: terms[i] = l[ks] / cfg.temperatures[i]; break;
      case Formulation::calibrated_softmax: terms[i] = target_prob(scaled(l, 1.0 / cfg.temperatures[i]), k); break;
      case Formulation::binarized: terms[i] = target_satisfied(l, k) ? 1.0 : -1.0; break;
      case Formulation::dynamic: terms[i] = 1.0 - target_prob(l, k); break;
    }
  }
  return terms;
}

inline RewardBreakdown static_reward(Formulation f, std::span<const Logits> logit_sets,
                                     std::span<const StyleTarget> targets, const RewardConfig& cfg) {
  check_inputs(logit_sets, targets);
  RewardBreakdown out;
  out.terms = terms_for(f, logit_sets, targets, cfg);
  out.weights = static_weights(cfg, targets.size());
  out.total = combine(out.terms, out.weights);
  return out;
}

}  // namespace detail

inline RewardBreakdown reward_logits(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets,
                                     const RewardConfig& cfg = {}) {
  return detail::static_reward(Formulation::logits, logit_sets, targets, cfg);
}

inline RewardBreakdown reward_softmax(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets,
                                      const RewardConfig& cfg = {}) {
  return detail::static_reward(Formulation::softmax, logit_sets, targets, cfg);
}

// +1 when sigma_k >= 0.5 (argmax for multi-class axes), -1 otherwise.
inline RewardBreakdown reward_binarized(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets,
                                        const RewardConfig& cfg = {}) {
  return detail::static_reward(Formulation::binarized, logit_sets, targets, cfg);
}

// `which` is calibrated_logits or calibrated_softmax.
inline RewardBreakdown reward_calibrated(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets,
                                         const RewardConfig& cfg,
                                         Formulation which = Formulation::calibrated_logits) {
  detail::require(is_calibrated(which), "reward_calibrated: formulation must be a calibrated one");
  return detail::static_reward(which, logit_sets, targets, cfg);
}

// Per-discriminator norm of the CE gradient w.r.t. its logits, normalized to
// sum to 1. All-zero norms fall back to uniform weights.
inline std::vector<double> grad_norms(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets,
                                      GradNorm norm = GradNorm::l2) {
  detail::check_inputs(logit_sets, targets);
  std::vector<double> out(targets.size());
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Vector g = ce_grad_logits(logit_sets[i], targets[i].target_class);
    out[i] = norm == GradNorm::l2 ? l2_norm(g) : l1_norm(g);
    total += out[i];
  }
  if (total == 0.0) return std::vector<double>(targets.size(), 1.0 / static_cast<double>(targets.size()));
  for (double& x : out) x /= total;
  return out;
}

// sum_i w_i (1 - sigma_k_i), w_i = +grad_norm_i if sigma_k_i > 0.5 (strict),
// -grad_norm_i otherwise.
inline RewardBreakdown reward_dynamic(std::span<const Logits> logit_sets, std::span<const StyleTarget> targets,
                                      GradNorm norm = GradNorm::l2) {
  detail::check_inputs(logit_sets, targets);
  RewardBreakdown out;
  out.weights = grad_norms(logit_sets, targets, norm);
  out.terms.resize(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = detail::target_prob(logit_sets[i], targets[i].target_class);
    out.terms[i] = 1.0 - p;
    if (!(p > 0.5)) out.weights[i] = -out.weights[i];
  }
  out.total = combine(out.terms, out.weights);
  return out;
}

// Terms of a static formulation weighted by unsigned gradient norms instead
// of alpha.
inline RewardBreakdown grad_weighted(Formulation base, std::span<const Logits> logit_sets,
                                     std::span<const StyleTarget> targets, const RewardConfig& cfg = {}) {
  detail::require(base != Formulation::dynamic, "grad_weighted: base must be a static formulation");
  detail::check_inputs(logit_sets, targets);
  RewardBreakdown out;
  out.terms = detail::terms_for(base, logit_sets, targets, cfg);
  out.weights = grad_norms(logit_sets, targets, cfg.norm);
  out.total = combine(out.terms, out.weights);
  return out;
}

inline RewardBreakdown compute_reward(const RewardConfig& cfg, std::span<const Logits> logit_sets,
                                      std::span<const StyleTarget> targets) {
  if (cfg.formulation == Formulation::dynamic) return reward_dynamic(logit_sets, targets, cfg.norm);
  if (cfg.grad_weighted) return grad_weighted(cfg.formulation, logit_sets, targets, cfg);
  return detail::static_reward(cfg.formulation, logit_sets, targets, cfg);
}

inline nlohmann::json to_json(const RewardBreakdown& b) {
  return {{"terms", b.terms}, {"weights", b.weights}, {"total", b.total}};
}

inline nlohmann::json to_json(const RewardConfig& c) {
  return {{"formulation", std::string(to_string(c.formulation))},
          {"alphas", c.alphas},
          {"temperatures", c.temperatures},
          {"raw_sum", c.raw_sum},
          {"grad_weighted", c.grad_weighted},
          {"norm", c.norm == GradNorm::l2 ? "l2" : "l1"}};
}

}  // namespace multistyle
