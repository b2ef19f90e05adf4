#pragma once

// Config-driven pipeline stages shared by the command-line tool and the
// acceptance suite.

#include <string>
#include <vector>

#include "multistyle/config.hpp"
#include "multistyle/eval.hpp"
#include "multistyle/experiment.hpp"
#include "multistyle/pplm.hpp"
#include "multistyle/ppo.hpp"

namespace multistyle {

inline std::vector<Prompt> eval_prompts(const ExperimentConfig& cfg) {
  return generate_prompts(cfg.stack.corpus, cfg.eval.num_prompts, cfg.eval.prompt_len);
}

inline EvalReport evaluate_policy(const ExperimentConfig& cfg, const Stack& stack, const TabularPolicy& policy,
                                  const std::vector<Prompt>& prompts, const std::string& name, int jobs = 1,
                                  std::vector<GenerationRecord>* records = nullptr) {
  const auto gens =
      generate_from_policy(policy, prompts, cfg.eval.num_generations, cfg.eval.max_len, eval_seed(cfg), jobs);
  return full_report(gens, stack.discriminators, cfg.targets, stack.reference, records, name);
}

struct RlRun {
  TrainResult result;
  Validity validity;
  EvalReport base;
  EvalReport trained;
  std::vector<GenerationRecord> records;  // trained policy
};

inline RlRun run_rl(const ExperimentConfig& cfg, const Stack& stack, int jobs = 1, const UpdateCallback& on_update = {}) {
  detail::require(!cfg.targets.empty(), "run_rl: no targets");
  const auto prompts = eval_prompts(cfg);
  const auto rm = make_reward_model(stack.discriminators, cfg.targets, cfg.reward);
  RlRun run;
  run.result = train_loop(stack.reference, stack.reference, rm, prompts, cfg.ppo, jobs, on_update);
  run.validity = check_run_validity(run.result.history, cfg.ppo.kl_reject_threshold);
  run.base = evaluate_policy(cfg, stack, stack.reference, prompts, "base", jobs);
  run.trained = evaluate_policy(cfg, stack, run.result.policy, prompts, std::string(to_string(cfg.reward.formulation)),
                                jobs, &run.records);
  return run;
}

struct PplmRun {
  RecurrentLm lm;
  std::vector<double> epoch_losses;
  double heldout_perplexity = 0.0;
  std::vector<HeadDiscriminator> heads;  // aligned with targets
  std::vector<double> head_f1;
  EvalReport unsteered;
  EvalReport steered;
  std::vector<Generation> unsteered_generations;
  std::vector<Generation> steered_generations;
  std::vector<GenerationRecord> records;  // steered
};

// One decode per prompt; decode i uses seed derive_seed(cfg.seed, i), so the
// steered and unsteered passes share random numbers.
inline std::vector<Generation> pplm_generate(const RecurrentLm& lm, const std::vector<HeadDiscriminator>& heads,
                                             const std::vector<StyleTarget>& targets, const std::vector<Prompt>& prompts,
                                             int max_len, const PplmConfig& cfg, int jobs = 1) {
  std::vector<Generation> gens(prompts.size());
  parallel_for(gens.size(), jobs, [&](std::size_t i) {
    gens[i] = {prompts[i].tokens, pplm_decode(lm, heads, targets, prompts[i].tokens, max_len, cfg, derive_seed(cfg.seed, i)),
               prompts[i].source};
  });
  return gens;
}

inline PplmRun run_pplm(const ExperimentConfig& cfg, const Stack& stack, int jobs = 1) {
  detail::require(!cfg.targets.empty(), "run_pplm: no targets");
  const auto& ps = cfg.pplm;
  const auto n = std::min<std::size_t>(stack.train.size(), static_cast<std::size_t>(ps.train_sequences));
  const std::vector<LabeledSequence> train(stack.train.begin(), stack.train.begin() + static_cast<std::ptrdiff_t>(n));

  PplmRun run;
  run.lm = train_rnn(RecurrentLm::random(cfg.stack.corpus.vocab_size, ps.embed_dim, ps.hidden_dim,
                                         derive_seed(ps.rnn.seed, 0x726e6e)),
                     train, ps.rnn, &run.epoch_losses);
  run.heldout_perplexity = rnn_perplexity(run.lm, stack.heldout);
  for (const auto& t : cfg.targets) {
    DiscTrainConfig dc = cfg.stack.disc_train;
    dc.seed = derive_seed(ps.rnn.seed, run.heads.size(), 0x68656164);
    run.heads.push_back(train_head(run.lm, train, t.axis, find_axis(cfg.stack.corpus, t.axis).num_classes(), dc));
    run.head_f1.push_back(head_macro_f1(run.lm, run.heads.back(), stack.heldout));
  }
  const auto prompts = eval_prompts(cfg);
  PplmConfig off = ps.decode;
  off.steps_per_token = 0;
  run.unsteered_generations = pplm_generate(run.lm, run.heads, cfg.targets, prompts, cfg.eval.max_len, off, jobs);
  run.steered_generations = pplm_generate(run.lm, run.heads, cfg.targets, prompts, cfg.eval.max_len, ps.decode, jobs);
  run.unsteered = full_report(run.unsteered_generations, stack.discriminators, cfg.targets, stack.reference, nullptr,
                              "unsteered");
  run.steered =
      full_report(run.steered_generations, stack.discriminators, cfg.targets, stack.reference, &run.records, "pplm");
  return run;
}

}  // namespace multistyle
