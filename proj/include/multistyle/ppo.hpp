#pragma once

// PPO-clip fine-tuning of a tabular policy against a frozen reference.
//
// The KL penalty enters the reward stream per token; the style reward is
// added at the final token only. Advantages come from GAE over a tabular
// critic and are whitened per batch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/discriminator.hpp"
#include "multistyle/error.hpp"
#include "multistyle/math.hpp"
#include "multistyle/parallel.hpp"
#include "multistyle/policy.hpp"
#include "multistyle/reward.hpp"
#include "multistyle/rng.hpp"

namespace multistyle {

enum class PolicyOptimizer { sgd, adam };

// None of the batch sizes, epochs or learning rates below are published
// settings; they are desk-scale defaults.
struct PpoConfig {
  double clip_epsilon = 0.2;
  int epochs_per_batch = 4;
  int rollouts_per_batch = 256;
  int minibatch_size = 64;
  PolicyOptimizer optimizer = PolicyOptimizer::sgd;
  double learning_rate = 100.0;      // step on policy logits (SGD on the token-mean surrogate)
  double value_learning_rate = 0.5;  // step toward per-context mean returns
  double value_coef = 0.5;
  double gamma = 1.0;
  double gae_lambda = 0.95;
  bool use_value_function = true;  // false: batch-mean baseline
  double init_kl_coef = 0.2;
  double kl_target = 6.0;
  double kl_horizon = 10000.0;
  bool adaptive_kl = true;
  double kl_reject_threshold = 20.0;
  int max_updates = 200;
  int max_len = 24;
  std::uint64_t seed = 1;
};

inline void validate(const PpoConfig& c) {
  using detail::require;
  require(c.clip_epsilon > 0.0, "PpoConfig: clip_epsilon must be > 0");
  require(c.init_kl_coef >= 0.0, "PpoConfig: init_kl_coef must be >= 0");
  require(c.kl_target > 0.0, "PpoConfig: kl_target must be > 0");
  require(c.kl_horizon > 0.0, "PpoConfig: kl_horizon must be > 0");
  require(c.epochs_per_batch >= 1, "PpoConfig: epochs_per_batch must be >= 1");
  require(c.rollouts_per_batch >= 1, "PpoConfig: rollouts_per_batch must be >= 1");
  require(c.minibatch_size >= 1, "PpoConfig: minibatch_size must be >= 1");
  require(c.learning_rate > 0.0 && c.value_learning_rate > 0.0, "PpoConfig: learning rates must be > 0");
  require(c.max_len >= 1, "PpoConfig: max_len must be >= 1");
  require(c.max_updates >= 0, "PpoConfig: max_updates must be >= 0");
}

// Proportional controller on the per-token KL coefficient:
// beta <- beta * (1 + clip((KL - target) / target, -0.2, 0.2) * tokens / horizon).
class AdaptiveKlController {
 public:
  AdaptiveKlController(double init_beta, double target, double horizon, bool adaptive = true)
      : beta_(init_beta), target_(target), horizon_(horizon), adaptive_(adaptive) {
    detail::require(init_beta >= 0.0, "AdaptiveKlController: beta must be >= 0");
    detail::require(target > 0.0, "AdaptiveKlController: target must be > 0");
    detail::require(horizon > 0.0, "AdaptiveKlController: horizon must be > 0");
  }

  double beta() const { return beta_; }

  double update(double observed_kl, double tokens_processed) {
    detail::require(observed_kl >= 0.0 || !adaptive_, "AdaptiveKlController: observed KL must be >= 0");
    if (!adaptive_) return beta_;
    const double error = std::clamp((observed_kl - target_) / target_, -0.2, 0.2);
    // Cap the horizon fraction at 1 so the multiplier stays in [0.8, 1.2].
    const double frac = std::min(tokens_processed / horizon_, 1.0);
    beta_ *= 1.0 + error * frac;
    return beta_;
  }

 private:
  double beta_;
  double target_;
  double horizon_;
  bool adaptive_;
};

inline double update_kl_coef(AdaptiveKlController& c, double observed_kl, double tokens_processed) {
  return c.update(observed_kl, tokens_processed);
}

// r_t = -beta (log pi(a_t) - log pi_ref(a_t)); the last token also gets R.
inline std::vector<double> assemble_token_rewards(const Rollout& r, double terminal_reward, double beta) {
  detail::require_dims(r.logprobs_policy.size() == r.generated.size() && r.logprobs_ref.size() == r.generated.size(),
                       "assemble_token_rewards: per-token vectors differ in length");
  std::vector<double> out(r.generated.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = -beta * (r.logprobs_policy[t] - r.logprobs_ref[t]);
  if (!out.empty()) out.back() += terminal_reward;
  return out;
}

struct AdvantageResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Un-whitened GAE(gamma, lambda) for one trajectory; the value after the last
// token is 0.
inline AdvantageResult gae(std::span<const double> rewards, std::span<const double> values, double gamma,
                           double lambda) {
  detail::require_dims(rewards.size() == values.size(), "gae: rewards and values differ in length");
  AdvantageResult out;
  out.advantages.assign(rewards.size(), 0.0);
  out.returns.assign(rewards.size(), 0.0);
  double running = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double next_value = t + 1 < rewards.size() ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lambda * running;
    out.advantages[t] = running;
    out.returns[t] = running + values[t];
  }
  return out;
}

// Shift and scale all advantages of a batch to mean 0, variance 1. A batch
// with (numerically) zero variance becomes all zeros.
inline void whiten(std::vector<std::vector<double>>& batch) {
  double n = 0.0, s = 0.0;
  for (const auto& a : batch)
    for (double x : a) {
      s += x;
      n += 1.0;
    }
  if (n == 0.0) return;
  const double mu = s / n;
  double var = 0.0;
  for (const auto& a : batch)
    for (double x : a) var += (x - mu) * (x - mu);
  var /= n;
  const double scale = std::max(std::abs(mu), 1.0);
  if (!(var > 1e-24 * scale * scale)) {
    for (auto& a : batch) std::fill(a.begin(), a.end(), 0.0);
    return;
  }
  const double inv_sd = 1.0 / std::sqrt(var);
  for (auto& a : batch)
    for (double& x : a) x = (x - mu) * inv_sd;
}

// Fills advantages and returns of every rollout from its per-token rewards.
inline void compute_advantages(std::vector<Rollout>& batch, const ValueTable& values, const PpoConfig& cfg) {
  std::vector<std::vector<double>> adv(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto& r = batch[i];
    std::vector<double> v(r.generated.size(), 0.0);
    if (cfg.use_value_function) {
      const auto ctx = rollout_contexts(values.shape, r.prompt, r.generated);
      for (std::size_t t = 0; t < ctx.size(); ++t) v[t] = values.values[ctx[t]];
    }
    auto res = gae(r.per_token_rewards, v, cfg.gamma, cfg.gae_lambda);
    adv[i] = std::move(res.advantages);
    r.returns = std::move(res.returns);
  }
  whiten(adv);
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i].advantages = std::move(adv[i]);
}

// Optimizer state carried across PPO steps (used by the Adam variant).
struct PpoOptimizer {
  Adam policy;

  explicit PpoOptimizer(const PpoConfig& cfg = {}) { policy.learning_rate = cfg.learning_rate; }
};

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
};

// Gradient of the clipped surrogate (to be maximized) w.r.t. the policy
// table for the given rollouts, averaged over tokens. Returns the mean
// surrogate.
inline double surrogate_gradient(const TabularPolicy& policy, std::span<const Rollout* const> rollouts,
                                 double clip_epsilon, Vector& grad, double* clip_fraction = nullptr) {
  std::fill(grad.begin(), grad.end(), 0.0);
  const auto v = static_cast<std::size_t>(policy.vocab_size());
  std::size_t tokens = 0, clipped = 0;
  for (const Rollout* r : rollouts) tokens += r->generated.size();
  if (tokens == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(tokens);
  double objective = 0.0;
  for (const Rollout* r : rollouts) {
    const auto ctx = rollout_contexts(policy.shape, r->prompt, r->generated);
    for (std::size_t t = 0; t < ctx.size(); ++t) {
      const auto a = static_cast<std::size_t>(r->generated[t]);
      const auto row = policy.row(ctx[t]);
      const Vector lp = log_softmax(row);
      const double ratio = std::exp(lp[a] - r->logprobs_policy[t]);
      const double adv = r->advantages[t];
      const double unclipped = ratio * adv;
      const double clipped_obj = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv;
      objective += std::min(unclipped, clipped_obj) * inv;
      if (clipped_obj < unclipped) {
        ++clipped;
        continue;  // clipped branch is flat in the parameters
      }
      const double coef = unclipped * inv;
      if (coef == 0.0) continue;
      double* g = grad.data() + ctx[t] * v;
      for (std::size_t b = 0; b < v; ++b) g[b] -= coef * std::exp(lp[b]);
      g[a] += coef;
    }
  }
  if (clip_fraction) *clip_fraction = static_cast<double>(clipped) / static_cast<double>(tokens);
  return objective;
}

// epochs_per_batch passes of shuffled minibatch ascent (SGD or Adam) on the clipped
// surrogate plus critic regression (coefficient value_coef).
inline PpoStats ppo_step(TabularPolicy& policy, ValueTable& values, const std::vector<Rollout>& batch,
                         const PpoConfig& cfg, PpoOptimizer& opt, Rng& rng) {
  validate(cfg);
  for (const auto& r : batch) {
    detail::require_dims(r.advantages.size() == r.generated.size() && r.returns.size() == r.generated.size() &&
                             r.logprobs_policy.size() == r.generated.size(),
                         "ppo_step: rollout advantages/returns are not computed");
  }
  PpoStats stats;
  if (batch.empty()) return stats;
  Vector policy_grad(policy.logits.size());
  Vector value_grad(values.values.size());
  Vector value_visits(values.values.size());
  std::vector<std::size_t> order(batch.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double n_minibatches = 0.0;
  for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch_size));
      std::vector<const Rollout*> mb;
      for (std::size_t i = start; i < end; ++i) mb.push_back(&batch[order[i]]);
      double clip_frac = 0.0;
      const double surrogate = surrogate_gradient(policy, mb, cfg.clip_epsilon, policy_grad, &clip_frac);
      if (cfg.optimizer == PolicyOptimizer::sgd) {
        for (std::size_t i = 0; i < policy_grad.size(); ++i) policy.logits[i] += cfg.learning_rate * policy_grad[i];
      } else {
        // Adam minimizes: negate the ascent direction.
        for (double& g : policy_grad) g = -g;
        opt.policy.step(policy.logits, policy_grad);
      }

      double vloss = 0.0;
      if (cfg.use_value_function) {
        // Squared-error regression, preconditioned by per-context visit
        // counts: each visited entry moves toward its minibatch mean return.
        std::fill(value_grad.begin(), value_grad.end(), 0.0);
        std::fill(value_visits.begin(), value_visits.end(), 0.0);
        std::size_t tokens = 0;
        for (const Rollout* r : mb) tokens += r->generated.size();
        const double inv = tokens ? 1.0 / static_cast<double>(tokens) : 0.0;
        for (const Rollout* r : mb) {
          const auto ctx = rollout_contexts(values.shape, r->prompt, r->generated);
          for (std::size_t t = 0; t < ctx.size(); ++t) {
            const double diff = values.values[ctx[t]] - r->returns[t];
            vloss += cfg.value_coef * diff * diff * inv;
            value_grad[ctx[t]] += 2.0 * cfg.value_coef * diff;
            value_visits[ctx[t]] += 1.0;
          }
        }
        for (std::size_t c = 0; c < value_grad.size(); ++c) {
          if (value_visits[c] > 0.0) values.values[c] -= cfg.value_learning_rate * value_grad[c] / value_visits[c];
        }
      }
      stats.policy_loss += -surrogate;
      stats.value_loss += vloss;
      stats.clip_fraction += clip_frac;
      n_minibatches += 1.0;
    }
  }
  ++policy.version;
  stats.policy_loss /= n_minibatches;
  stats.value_loss /= n_minibatches;
  stats.clip_fraction /= n_minibatches;
  return stats;
}

// Discriminators paired with their targets plus the reward formulation.
struct RewardModel {
  std::vector<LinearDiscriminator> discriminators;  // aligned with targets
  std::vector<StyleTarget> targets;
  RewardConfig config;

  std::vector<Logits> logits(std::span<const Token> completion) const {
    std::vector<Logits> out;
    out.reserve(discriminators.size());
    for (const auto& d : discriminators) out.push_back(score_tokens(d, completion));
    return out;
  }

  RewardBreakdown operator()(std::span<const Token> completion) const {
    const auto l = logits(completion);
    return compute_reward(config, l, targets);
  }

  bool all_satisfied(std::span<const Token> completion) const {
    const auto l = logits(completion);
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (!target_satisfied(l[i], targets[i].target_class)) return false;
    return true;
  }
};

// Pairs each target with its discriminator by axis name. Calibrated
// formulations take temperatures from the discriminators unless given.
inline RewardModel make_reward_model(const std::vector<LinearDiscriminator>& available,
                                     const std::vector<StyleTarget>& targets, RewardConfig cfg) {
  detail::require(!targets.empty(), "reward model: at least one target is required");
  RewardModel m;
  for (const auto& t : targets) {
    auto it = std::find_if(available.begin(), available.end(),
                           [&](const LinearDiscriminator& d) { return d.axis_name == t.axis; });
    if (it == available.end()) throw ValidationError("reward model: no discriminator with id '" + t.axis + "'");
    if (t.target_class < 0 || t.target_class >= it->num_classes) {
      throw ValidationError("reward model: target class for '" + t.axis + "' is out of range");
    }
    m.discriminators.push_back(*it);
  }
  m.targets = targets;
  if (is_calibrated(cfg.formulation) && cfg.temperatures.empty()) {
    for (const auto& d : m.discriminators) {
      if (!d.temperature) throw ValidationError("reward model: discriminator '" + d.axis_name + "' has no temperature");
      cfg.temperatures.push_back(*d.temperature);
    }
  }
  m.config = std::move(cfg);
  return m;
}

struct UpdateRecord {
  int update = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double beta = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double target_rate = 0.0;
};

struct TrainHistory {
  std::vector<UpdateRecord> records;

  double final_kl() const { return records.empty() ? 0.0 : records.back().mean_kl; }
};

inline nlohmann::json to_json(const UpdateRecord& r) {
  return {{"update", r.update},           {"mean_reward", r.mean_reward}, {"mean_kl", r.mean_kl},
          {"beta", r.beta},               {"policy_loss", r.policy_loss}, {"value_loss", r.value_loss},
          {"target_rate", r.target_rate}};
}

inline std::string to_jsonl(const TrainHistory& h) {
  std::string out;
  for (const auto& r : h.records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

struct TrainResult {
  TabularPolicy policy;
  ValueTable values;
  TrainHistory history;
};

// Rollouts for one batch: prompt choice and sampling are seeded per
// (seed, update, index), so results do not depend on `jobs`.
inline std::vector<Rollout> collect_rollouts(const TabularPolicy& policy, const TabularPolicy& ref,
                                             const std::vector<Prompt>& prompts, int count, int max_len,
                                             std::uint64_t seed, int jobs) {
  detail::require(!prompts.empty(), "collect_rollouts: prompts must be nonempty");
  std::vector<Rollout> batch(static_cast<std::size_t>(count));
  parallel_for(batch.size(), jobs, [&](std::size_t i) {
    Rng pick(derive_seed(seed, i, 0x70));
    const auto& prompt = prompts[uniform_index(pick, prompts.size())];
    Rollout r = sample(policy, prompt.tokens, max_len, derive_seed(seed, i, 0x73));
    r.source = prompt.source;
    r.logprobs_ref = logprob(ref, r.prompt, r.generated);
    batch[i] = std::move(r);
  });
  return batch;
}

inline double sequence_kl(const Rollout& r) {
  double s = 0.0;
  for (std::size_t t = 0; t < r.generated.size(); ++t) s += r.logprobs_policy[t] - r.logprobs_ref[t];
  return s;
}

using UpdateCallback = std::function<void(const UpdateRecord&)>;

// sample -> score -> token rewards -> GAE -> PPO step -> KL coefficient
// update, repeated max_updates times.
inline TrainResult train_loop(TabularPolicy policy, const TabularPolicy& ref, const RewardModel& reward,
                              const std::vector<Prompt>& prompts, const PpoConfig& cfg, int jobs = 1,
                              const UpdateCallback& on_update = {}) {
  validate(cfg);
  detail::require(policy.shape.vocab_size == ref.shape.vocab_size && policy.shape.order == ref.shape.order,
                  "train_loop: policy and reference shapes differ");
  for (const auto& d : reward.discriminators) {
    detail::require(d.feature_spec.vocab_size == policy.vocab_size(),
                    "train_loop: discriminator vocabulary does not match the policy");
  }
  TrainResult out{std::move(policy), ValueTable::zeros(ref.shape.vocab_size, ref.shape.order), {}};
  AdaptiveKlController kl(cfg.init_kl_coef, cfg.kl_target, cfg.kl_horizon, cfg.adaptive_kl);
  PpoOptimizer opt(cfg);
  Rng ppo_rng(derive_seed(cfg.seed, 0x70706fULL));
  for (int u = 0; u < cfg.max_updates; ++u) {
    auto batch = collect_rollouts(out.policy, ref, prompts, cfg.rollouts_per_batch, cfg.max_len,
                                  derive_seed(cfg.seed, static_cast<std::uint64_t>(u)), jobs);
    UpdateRecord rec;
    rec.update = u;
    rec.beta = kl.beta();
    std::vector<double> terminal(batch.size());
    std::vector<char> hit(batch.size());
    parallel_for(batch.size(), jobs, [&](std::size_t i) {
      terminal[i] = reward(batch[i].generated).total;
      hit[i] = reward.all_satisfied(batch[i].generated) ? 1 : 0;
    });
    double tokens = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto& r = batch[i];
      r.terminal_reward = terminal[i];
      r.per_token_rewards = assemble_token_rewards(r, terminal[i], kl.beta());
      rec.mean_reward += terminal[i];
      rec.mean_kl += sequence_kl(r);
      rec.target_rate += hit[i];
      tokens += static_cast<double>(r.generated.size());
    }
    const auto n = static_cast<double>(batch.size());
    rec.mean_reward /= n;
    rec.mean_kl /= n;
    rec.target_rate /= n;
    compute_advantages(batch, out.values, cfg);
    const auto stats = ppo_step(out.policy, out.values, batch, cfg, opt, ppo_rng);
    rec.policy_loss = stats.policy_loss;
    rec.value_loss = stats.value_loss;
    kl.update(std::max(rec.mean_kl, 0.0), tokens);
    out.history.records.push_back(rec);
    if (on_update) on_update(rec);
  }
  return out;
}

struct Validity {
  bool accepted = true;
  std::string reason;
};

// A run is rejected when its final mean KL to the reference exceeds the
// threshold.
inline Validity check_run_validity(const TrainHistory& history, double kl_reject_threshold = 20.0) {
  detail::require(!history.records.empty(), "check_run_validity: history must be nonempty");
  const double kl = history.final_kl();
  if (kl > kl_reject_threshold) {
    return {false, "final KL " + std::to_string(kl) + " exceeds " + std::to_string(kl_reject_threshold)};
  }
  return {true, ""};
}

inline nlohmann::json to_json(const PpoConfig& c) {
  return {{"clip_epsilon", c.clip_epsilon},
          {"epochs_per_batch", c.epochs_per_batch},
          {"rollouts_per_batch", c.rollouts_per_batch},
          {"minibatch_size", c.minibatch_size},
          {"optimizer", c.optimizer == PolicyOptimizer::sgd ? "sgd" : "adam"},
          {"learning_rate", c.learning_rate},
          {"value_learning_rate", c.value_learning_rate},
          {"value_coef", c.value_coef},
          {"gamma", c.gamma},
          {"gae_lambda", c.gae_lambda},
          {"use_value_function", c.use_value_function},
          {"init_kl_coef", c.init_kl_coef},
          {"kl_target", c.kl_target},
          {"kl_horizon", c.kl_horizon},
          {"adaptive_kl", c.adaptive_kl},
          {"kl_reject_threshold", c.kl_reject_threshold},
          {"max_updates", c.max_updates},
          {"max_len", c.max_len},
          {"seed", c.seed}};
}

}  // namespace multistyle
