#pragma once

// End-to-end building blocks shared by the CLI and the acceptance suite:
// standard synthetic axes, the trained "stack" (corpus, discriminators,
// reference policy), and policy evaluation.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "multistyle/corpus.hpp"
#include "multistyle/discriminator.hpp"
#include "multistyle/eval.hpp"
#include "multistyle/features.hpp"
#include "multistyle/parallel.hpp"
#include "multistyle/policy.hpp"
#include "multistyle/ppo.hpp"
#include "multistyle/rng.hpp"

namespace multistyle {

struct AxisTemplate {
  std::string name;
  std::vector<std::string> classes;
  int lexicon_size = 4;
  std::optional<int> neutral_class;
};

inline AxisTemplate sentiment_axis() { return {"sentiment", {"positive", "negative"}, 4, {}}; }
inline AxisTemplate formality_axis() { return {"formality", {"formal", "informal"}, 4, {}}; }
inline AxisTemplate irony_axis() { return {"irony", {"ironic", "not_ironic"}, 4, {}}; }
inline AxisTemplate emotion_axis() {
  return {"emotion", {"fear", "anger", "joy", "sadness", "disgust", "surprise", "neutral"}, 3, 6};
}

// Assigns consecutive disjoint token blocks to every non-neutral class.
inline std::vector<StyleAxis> build_axes(const std::vector<AxisTemplate>& templates, int vocab_size) {
  std::vector<StyleAxis> out;
  Token next = 0;
  for (const auto& t : templates) {
    StyleAxis a;
    a.name = t.name;
    a.class_names = t.classes;
    a.neutral_class = t.neutral_class;
    for (int c = 0; c < static_cast<int>(t.classes.size()); ++c) {
      std::vector<Token> lex;
      if (!(t.neutral_class && *t.neutral_class == c)) {
        for (int i = 0; i < t.lexicon_size; ++i) lex.push_back(next++);
      }
      a.class_lexicons.push_back(std::move(lex));
    }
    out.push_back(std::move(a));
  }
  detail::require(next <= vocab_size, "build_axes: lexicons do not fit in the vocabulary");
  return out;
}

inline const StyleAxis& find_axis(const CorpusSpec& spec, const std::string& name) {
  for (const auto& a : spec.axes)
    if (a.name == name) return a;
  throw ValidationError("unknown axis '" + name + "'");
}

// Co-occurrence table over two binary axes (first axis outer) that puts
// `mass` on the (class_a, class_b) cell and spreads the rest evenly.
inline std::vector<double> pair_cooccurrence(int class_a, int class_b, double mass) {
  std::vector<double> co(4, (1.0 - mass) / 3.0);
  co[static_cast<std::size_t>(class_a * 2 + class_b)] = mass;
  return co;
}

struct StackConfig {
  CorpusSpec corpus;
  FeatureSpec features;  // vocab_size is taken from the corpus
  DiscTrainConfig disc_train;
  LmTrainConfig lm;
  int policy_order = 2;
  double heldout_fraction = 0.25;
};

struct DiscriminatorReport {
  std::string axis;
  double heldout_macro_f1 = 0.0;
  double temperature = 1.0;
  double ece_before = 0.0;
  double ece_after = 0.0;
  double nll_before = 0.0;
  double nll_after = 0.0;
};

struct Stack {
  std::vector<LabeledSequence> corpus;
  std::vector<LabeledSequence> train;
  std::vector<LabeledSequence> heldout;
  std::vector<LinearDiscriminator> discriminators;
  std::vector<DiscriminatorReport> reports;
  TabularPolicy reference;
};

inline LinearDiscriminator train_axis_discriminator(const StackConfig& cfg, const std::vector<LabeledSequence>& train,
                                                    const std::vector<LabeledSequence>& heldout,
                                                    const StyleAxis& axis, DiscriminatorReport* report) {
  FeatureSpec fs = cfg.features;
  fs.vocab_size = cfg.corpus.vocab_size;
  auto d = LinearDiscriminator::zeros(axis.name, axis.num_classes(), fs);
  DiscTrainConfig tc = cfg.disc_train;
  tc.seed = derive_seed(cfg.corpus.seed, std::hash<std::string>{}(axis.name) & 0xffff, 0x64697363);
  d = train_disc(std::move(d), make_examples(train, axis.name, fs), tc);
  const auto held = make_examples(heldout, axis.name, fs);
  const auto cal = fit_temperature(d, held);
  d.temperature = cal.temperature;
  if (report) {
    report->axis = axis.name;
    report->heldout_macro_f1 = macro_f1(d, held);
    report->temperature = cal.temperature;
    report->ece_before = ece(d, held, 10, 1.0);
    report->ece_after = ece(d, held, 10, cal.temperature);
    report->nll_before = mean_nll(d, held, 1.0);
    report->nll_after = mean_nll(d, held, cal.temperature);
  }
  return d;
}

// Corpus, split, one calibrated discriminator per axis, reference policy.
inline Stack build_stack(const StackConfig& cfg) {
  Stack s;
  s.corpus = generate_corpus(cfg.corpus);
  auto [train, held] = split_corpus(s.corpus, cfg.heldout_fraction, derive_seed(cfg.corpus.seed, 0x73706c6974ULL));
  s.train = std::move(train);
  s.heldout = std::move(held);
  for (const auto& axis : cfg.corpus.axes) {
    DiscriminatorReport rep;
    s.discriminators.push_back(train_axis_discriminator(cfg, s.train, s.heldout, axis, &rep));
    s.reports.push_back(rep);
  }
  s.reference = train_lm(TabularPolicy::zeros(cfg.corpus.vocab_size, cfg.policy_order), s.train, cfg.lm);
  return s;
}

// `count` completions sampled from `policy`, prompts cycled in order, each
// with a seed derived from (seed, index).
inline std::vector<Generation> generate_from_policy(const TabularPolicy& policy, const std::vector<Prompt>& prompts,
                                                    int count, int max_len, std::uint64_t seed, int jobs = 1) {
  detail::require(!prompts.empty(), "generate_from_policy: prompts must be nonempty");
  std::vector<Generation> out(static_cast<std::size_t>(count));
  parallel_for(out.size(), jobs, [&](std::size_t i) {
    const auto& p = prompts[i % prompts.size()];
    auto r = sample(policy, p.tokens, max_len, derive_seed(seed, i, 0x6576616c));
    out[i] = {p.tokens, std::move(r.generated), p.source};
  });
  return out;
}

inline StyleTarget parse_target(const CorpusSpec& spec, const std::string& axis, const std::string& cls) {
  const auto& a = find_axis(spec, axis);
  int k = a.class_index(cls);
  if (k < 0) {
    try {
      std::size_t used = 0;
      k = std::stoi(cls, &used);
      if (used != cls.size()) k = -1;
    } catch (const std::exception&) {
      k = -1;
    }
  }
  if (k < 0 || k >= a.num_classes()) throw ValidationError("unknown class '" + cls + "' for axis '" + axis + "'");
  return {axis, k};
}

// "axis=class,axis=class"
inline std::vector<StyleTarget> parse_targets(const CorpusSpec& spec, const std::string& text) {
  std::vector<StyleTarget> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    if (!item.empty()) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ValidationError("target '" + item + "' must look like axis=class");
      out.push_back(parse_target(spec, item.substr(0, eq), item.substr(eq + 1)));
    }
    pos = end + 1;
  }
  return out;
}

}  // namespace multistyle
