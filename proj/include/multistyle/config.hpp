#pragma once

// JSON experiment configuration: one file drives a full pipeline. Parsing
// fills defaults, rejects unknown keys and checks that every target names a
// known axis. to_json writes the resolved form, which parses back to the
// same configuration.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/experiment.hpp"
#include "multistyle/pplm.hpp"
#include "multistyle/reward.hpp"

namespace multistyle {

struct EvalSettings {
  int num_generations = 2000;
  int num_prompts = 500;
  int prompt_len = 4;
  int max_len = 24;
};

struct PplmSettings {
  int embed_dim = 16;
  int hidden_dim = 32;
  int train_sequences = 2000;  // RNN and heads use the first N training sequences
  RnnTrainConfig rnn;
  PplmConfig decode;
};

struct SweepSettings {
  std::vector<Formulation> formulations;
  std::vector<std::vector<StyleTarget>> target_sets;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  std::vector<AxisTemplate> axes;
  bool corpus_seed_pinned = false;
  StackConfig stack;
  RewardConfig reward;
  std::vector<StyleTarget> targets;
  PpoConfig ppo;
  PplmSettings pplm;
  EvalSettings eval;
  SweepSettings sweep;
};

// Re-seeds everything that is not pinned in the file.
inline void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  if (!cfg.corpus_seed_pinned) cfg.stack.corpus.seed = seed;
  cfg.ppo.seed = seed;
  cfg.pplm.rnn.seed = seed;
  cfg.pplm.decode.seed = seed;
}

inline std::uint64_t eval_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 0x6576616c); }

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  require(j.is_object(), "config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!ok) throw ValidationError("config: unknown key '" + key + "' in '" + where + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config: key '") + key + "' has the wrong type");
  }
}

inline AxisTemplate axis_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    for (const auto& t : {sentiment_axis(), formality_axis(), irony_axis(), emotion_axis()})
      if (t.name == name) return t;
    throw ValidationError("config: unknown built-in axis '" + name + "'");
  }
  check_keys(j, "corpus.axes[]", {"name", "classes", "lexicon_size", "neutral_class"});
  AxisTemplate t;
  read(j, "name", t.name);
  read(j, "classes", t.classes);
  read(j, "lexicon_size", t.lexicon_size);
  if (j.contains("neutral_class")) {
    int n = 0;
    read(j, "neutral_class", n);
    t.neutral_class = n;
  }
  require(!t.name.empty(), "config: every axis needs a name");
  require(t.classes.size() >= 2, "config: axis '" + t.name + "' needs at least two classes");
  require(t.lexicon_size >= 1, "config: axis '" + t.name + "' needs lexicon_size >= 1");
  return t;
}

inline nlohmann::json axis_to_json(const AxisTemplate& t) {
  nlohmann::json j = {{"name", t.name}, {"classes", t.classes}, {"lexicon_size", t.lexicon_size}};
  if (t.neutral_class) j["neutral_class"] = *t.neutral_class;
  return j;
}

inline void check_targets_resolve(const CorpusSpec& spec, const std::vector<StyleTarget>& targets) {
  for (const auto& t : targets) {
    const bool found = std::any_of(spec.axes.begin(), spec.axes.end(), [&](const StyleAxis& a) { return a.name == t.axis; });
    if (!found) throw ValidationError("config: no discriminator with id '" + t.axis + "'");
  }
}

}  // namespace detail

inline std::string targets_to_string(const std::vector<StyleTarget>& targets) {
  std::string out;
  for (const auto& t : targets) {
    if (!out.empty()) out += ',';
    out += t.axis + "=" + std::to_string(t.target_class);
  }
  return out;
}

// Targets given on the command line; axes outside the corpus are reported by
// discriminator id.
inline std::vector<StyleTarget> resolve_targets(const ExperimentConfig& cfg, const std::string& text) {
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    const auto eq = item.find('=');
    if (eq != std::string::npos) detail::check_targets_resolve(cfg.stack.corpus, {{item.substr(0, eq), 0}});
    pos = end + 1;
  }
  return parse_targets(cfg.stack.corpus, text);
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read;
  check_keys(j, "<root>",
             {"seed", "output_dir", "corpus", "features", "discriminators", "policy", "reward", "targets", "ppo", "pplm",
              "eval", "sweep"});
  ExperimentConfig cfg;
  if (!j.contains("seed")) throw ValidationError("config: 'seed' is required");
  read(j, "seed", cfg.seed);
  read(j, "output_dir", cfg.output_dir);

  auto& corpus = cfg.stack.corpus;
  const auto& jc = j.contains("corpus") ? j.at("corpus") : nlohmann::json::object();
  check_keys(jc, "corpus",
             {"vocab_size", "axes", "cooccurrence", "pair_cooccurrence", "min_length", "max_length", "num_sequences",
              "seed", "p_style", "sources", "heldout_fraction"});
  read(jc, "vocab_size", corpus.vocab_size);
  read(jc, "min_length", corpus.min_length);
  read(jc, "max_length", corpus.max_length);
  read(jc, "num_sequences", corpus.num_sequences);
  read(jc, "p_style", corpus.p_style);
  read(jc, "sources", corpus.sources);
  read(jc, "heldout_fraction", cfg.stack.heldout_fraction);
  corpus.seed = cfg.seed;
  if (jc.contains("seed")) {
    read(jc, "seed", corpus.seed);
    cfg.corpus_seed_pinned = true;
  }
  if (jc.contains("axes")) {
    detail::require(jc.at("axes").is_array(), "config: corpus.axes must be an array");
    for (const auto& a : jc.at("axes")) cfg.axes.push_back(detail::axis_from_json(a));
  } else {
    cfg.axes = {sentiment_axis(), formality_axis()};
  }
  corpus.axes = build_axes(cfg.axes, corpus.vocab_size);
  read(jc, "cooccurrence", corpus.cooccurrence);
  if (jc.contains("pair_cooccurrence")) {
    const auto& p = jc.at("pair_cooccurrence");
    check_keys(p, "corpus.pair_cooccurrence", {"cell", "mass"});
    std::vector<int> cell;
    double mass = 0.0;
    read(p, "cell", cell);
    read(p, "mass", mass);
    detail::require(corpus.axes.size() == 2 && corpus.axes[0].num_classes() == 2 && corpus.axes[1].num_classes() == 2,
                    "config: pair_cooccurrence needs exactly two binary axes");
    detail::require(cell.size() == 2 && cell[0] >= 0 && cell[0] < 2 && cell[1] >= 0 && cell[1] < 2,
                    "config: pair_cooccurrence.cell must be two class indices");
    detail::require(!jc.contains("cooccurrence"), "config: give either cooccurrence or pair_cooccurrence");
    corpus.cooccurrence = pair_cooccurrence(cell[0], cell[1], mass);
  }
  validate(corpus);

  if (j.contains("features")) {
    const auto& jf = j.at("features");
    check_keys(jf, "features", {"ngram_orders", "normalize"});
    read(jf, "ngram_orders", cfg.stack.features.ngram_orders);
    read(jf, "normalize", cfg.stack.features.normalize);
  }
  cfg.stack.features.vocab_size = corpus.vocab_size;
  validate(cfg.stack.features);

  if (j.contains("discriminators")) {
    const auto& jd = j.at("discriminators");
    check_keys(jd, "discriminators", {"learning_rate", "epochs", "batch_size", "l2_penalty", "max_halvings"});
    auto& d = cfg.stack.disc_train;
    read(jd, "learning_rate", d.learning_rate);
    read(jd, "epochs", d.epochs);
    read(jd, "batch_size", d.batch_size);
    read(jd, "l2_penalty", d.l2_penalty);
    read(jd, "max_halvings", d.max_halvings);
  }

  if (j.contains("policy")) {
    const auto& jp = j.at("policy");
    check_keys(jp, "policy", {"order", "smoothing"});
    read(jp, "order", cfg.stack.policy_order);
    read(jp, "smoothing", cfg.stack.lm.smoothing);
  }
  detail::require(cfg.stack.policy_order >= 1, "config: policy.order must be >= 1");
  detail::require(cfg.stack.lm.smoothing > 0.0, "config: policy.smoothing must be > 0");

  if (j.contains("reward")) {
    const auto& jr = j.at("reward");
    check_keys(jr, "reward", {"formulation", "alphas", "raw_sum", "grad_weighted", "norm"});
    if (jr.contains("formulation")) cfg.reward.formulation = parse_formulation(jr.at("formulation").get<std::string>());
    read(jr, "alphas", cfg.reward.alphas);
    read(jr, "raw_sum", cfg.reward.raw_sum);
    read(jr, "grad_weighted", cfg.reward.grad_weighted);
    if (jr.contains("norm")) {
      const auto n = jr.at("norm").get<std::string>();
      detail::require(n == "l2" || n == "l1", "config: reward.norm must be l2 or l1");
      cfg.reward.norm = n == "l2" ? GradNorm::l2 : GradNorm::l1;
    }
  }

  if (j.contains("targets")) {
    detail::require(j.at("targets").is_string(), "config: targets must be a string like \"axis=class,axis=class\"");
    cfg.targets = resolve_targets(cfg, j.at("targets").get<std::string>());
  }

  if (j.contains("ppo")) {
    const auto& jp = j.at("ppo");
    check_keys(jp, "ppo",
               {"clip_epsilon", "epochs_per_batch", "rollouts_per_batch", "minibatch_size", "optimizer", "learning_rate",
                "value_learning_rate", "value_coef", "gamma", "gae_lambda", "use_value_function", "init_kl_coef",
                "kl_target", "kl_horizon", "adaptive_kl", "kl_reject_threshold", "max_updates", "max_len"});
    auto& p = cfg.ppo;
    read(jp, "clip_epsilon", p.clip_epsilon);
    read(jp, "epochs_per_batch", p.epochs_per_batch);
    read(jp, "rollouts_per_batch", p.rollouts_per_batch);
    read(jp, "minibatch_size", p.minibatch_size);
    if (jp.contains("optimizer")) {
      const auto o = jp.at("optimizer").get<std::string>();
      detail::require(o == "sgd" || o == "adam", "config: ppo.optimizer must be sgd or adam");
      p.optimizer = o == "sgd" ? PolicyOptimizer::sgd : PolicyOptimizer::adam;
    }
    read(jp, "learning_rate", p.learning_rate);
    read(jp, "value_learning_rate", p.value_learning_rate);
    read(jp, "value_coef", p.value_coef);
    read(jp, "gamma", p.gamma);
    read(jp, "gae_lambda", p.gae_lambda);
    read(jp, "use_value_function", p.use_value_function);
    read(jp, "init_kl_coef", p.init_kl_coef);
    read(jp, "kl_target", p.kl_target);
    read(jp, "kl_horizon", p.kl_horizon);
    read(jp, "adaptive_kl", p.adaptive_kl);
    read(jp, "kl_reject_threshold", p.kl_reject_threshold);
    read(jp, "max_updates", p.max_updates);
    read(jp, "max_len", p.max_len);
  }

  if (j.contains("pplm")) {
    const auto& jp = j.at("pplm");
    check_keys(jp, "pplm",
               {"embed_dim", "hidden_dim", "train_sequences", "rnn_learning_rate", "rnn_epochs", "rnn_batch_size",
                "truncation", "kl_coef", "step_size", "steps_per_token", "max_grad_norm"});
    auto& p = cfg.pplm;
    read(jp, "embed_dim", p.embed_dim);
    read(jp, "hidden_dim", p.hidden_dim);
    read(jp, "train_sequences", p.train_sequences);
    read(jp, "rnn_learning_rate", p.rnn.learning_rate);
    read(jp, "rnn_epochs", p.rnn.epochs);
    read(jp, "rnn_batch_size", p.rnn.batch_size);
    read(jp, "truncation", p.rnn.truncation);
    read(jp, "kl_coef", p.decode.kl_coef);
    read(jp, "step_size", p.decode.step_size);
    read(jp, "steps_per_token", p.decode.steps_per_token);
    read(jp, "max_grad_norm", p.decode.max_grad_norm);
  }
  validate(cfg.pplm.decode);
  detail::require(cfg.pplm.embed_dim >= 1 && cfg.pplm.hidden_dim >= 2, "config: pplm dimensions are too small");
  detail::require(cfg.pplm.train_sequences >= 1, "config: pplm.train_sequences must be >= 1");

  if (j.contains("eval")) {
    const auto& je = j.at("eval");
    check_keys(je, "eval", {"num_generations", "num_prompts", "prompt_len", "max_len"});
    read(je, "num_generations", cfg.eval.num_generations);
    read(je, "num_prompts", cfg.eval.num_prompts);
    read(je, "prompt_len", cfg.eval.prompt_len);
    read(je, "max_len", cfg.eval.max_len);
  }
  detail::require(cfg.eval.num_generations >= 1 && cfg.eval.num_prompts >= 1 && cfg.eval.max_len >= 1,
                  "config: eval sizes must be >= 1");

  if (j.contains("sweep")) {
    const auto& js = j.at("sweep");
    check_keys(js, "sweep", {"formulations", "target_sets", "seeds"});
    std::vector<std::string> names, sets;
    read(js, "formulations", names);
    read(js, "target_sets", sets);
    read(js, "seeds", cfg.sweep.seeds);
    for (const auto& n : names) cfg.sweep.formulations.push_back(parse_formulation(n));
    for (const auto& s : sets) {
      cfg.sweep.target_sets.push_back(resolve_targets(cfg, s));
      detail::require(!cfg.sweep.target_sets.back().empty(), "config: empty sweep target set");
    }
  }

  apply_seed(cfg, cfg.seed);
  validate(cfg.ppo);
  return cfg;
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& c = cfg.stack.corpus;
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : cfg.axes) axes.push_back(detail::axis_to_json(a));
  nlohmann::json ppo = to_json(cfg.ppo);
  ppo.erase("seed");
  nlohmann::json reward = to_json(cfg.reward);
  reward.erase("temperatures");
  nlohmann::json sweep_sets = nlohmann::json::array();
  for (const auto& s : cfg.sweep.target_sets) sweep_sets.push_back(targets_to_string(s));
  nlohmann::json formulations = nlohmann::json::array();
  for (Formulation f : cfg.sweep.formulations) formulations.push_back(std::string(to_string(f)));
  const auto& p = cfg.pplm;
  return {
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir},
      {"corpus",
       {{"vocab_size", c.vocab_size},
        {"axes", axes},
        {"cooccurrence", resolved_cooccurrence(c)},
        {"min_length", c.min_length},
        {"max_length", c.max_length},
        {"num_sequences", c.num_sequences},
        {"seed", c.seed},
        {"p_style", c.p_style},
        {"sources", c.sources},
        {"heldout_fraction", cfg.stack.heldout_fraction}}},
      {"features", {{"ngram_orders", cfg.stack.features.ngram_orders}, {"normalize", cfg.stack.features.normalize}}},
      {"discriminators",
       {{"learning_rate", cfg.stack.disc_train.learning_rate},
        {"epochs", cfg.stack.disc_train.epochs},
        {"batch_size", cfg.stack.disc_train.batch_size},
        {"l2_penalty", cfg.stack.disc_train.l2_penalty},
        {"max_halvings", cfg.stack.disc_train.max_halvings}}},
      {"policy", {{"order", cfg.stack.policy_order}, {"smoothing", cfg.stack.lm.smoothing}}},
      {"reward", reward},
      {"targets", targets_to_string(cfg.targets)},
      {"ppo", ppo},
      {"pplm",
       {{"embed_dim", p.embed_dim},
        {"hidden_dim", p.hidden_dim},
        {"train_sequences", p.train_sequences},
        {"rnn_learning_rate", p.rnn.learning_rate},
        {"rnn_epochs", p.rnn.epochs},
        {"rnn_batch_size", p.rnn.batch_size},
        {"truncation", p.rnn.truncation},
        {"kl_coef", p.decode.kl_coef},
        {"step_size", p.decode.step_size},
        {"steps_per_token", p.decode.steps_per_token},
        {"max_grad_norm", p.decode.max_grad_norm}}},
      {"eval",
       {{"num_generations", cfg.eval.num_generations},
        {"num_prompts", cfg.eval.num_prompts},
        {"prompt_len", cfg.eval.prompt_len},
        {"max_len", cfg.eval.max_len}}},
      {"sweep", {{"formulations", formulations}, {"target_sets", sweep_sets}, {"seeds", cfg.sweep.seeds}}}};
}

}  // namespace multistyle
