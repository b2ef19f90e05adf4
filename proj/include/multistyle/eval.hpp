#pragma once

// Automatic evaluation: style accuracy, joint accuracy, perplexity under the
// reference policy, duplicate-bigram rate, per-source breakdown, and the
// frequency/controllability regression.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/corpus.hpp"
#include "multistyle/discriminator.hpp"
#include "multistyle/error.hpp"
#include "multistyle/policy.hpp"

namespace multistyle {

struct Generation {
  TokenSeq prompt;
  TokenSeq completion;
  std::string source;
};

struct AxisScore {
  std::string axis;
  int target_class = -1;  // -1 for uncontrolled axes
  int predicted = 0;
  double target_prob = 0.0;  // softmax of the target class (or of the predicted class if uncontrolled)
  bool satisfied = false;
};

struct GenerationRecord {
  Generation generation;
  std::vector<AxisScore> scores;  // targets first, then uncontrolled axes
  double perplexity = 0.0;
  double dup_bigram = 0.0;

  bool all_satisfied() const {
    return std::all_of(scores.begin(), scores.end(),
                       [](const AxisScore& s) { return s.target_class < 0 || s.satisfied; });
  }
};

// 1 - distinct / total over adjacent bigrams; 0 for sequences shorter than 2.
inline double dup_bigram_rate(std::span<const Token> seq) {
  if (seq.size() < 2) return 0.0;
  std::set<std::pair<Token, Token>> distinct;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) distinct.insert({seq[i], seq[i + 1]});
  return 1.0 - static_cast<double>(distinct.size()) / static_cast<double>(seq.size() - 1);
}

inline double style_accuracy(const std::vector<TokenSeq>& completions, const LinearDiscriminator& d, int target_class) {
  detail::require(!completions.empty(), "style_accuracy: generations must be nonempty");
  std::size_t hits = 0;
  for (const auto& c : completions) hits += target_satisfied(score_tokens(d, c), target_class) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(completions.size());
}

inline const LinearDiscriminator& find_discriminator(const std::vector<LinearDiscriminator>& discs,
                                                     const std::string& id) {
  for (const auto& d : discs)
    if (d.axis_name == id) return d;
  throw ValidationError("no discriminator with id '" + id + "'");
}

// Fraction of generations satisfying every target at once; 1 for no targets.
inline double joint_accuracy(const std::vector<TokenSeq>& completions, const std::vector<LinearDiscriminator>& discs,
                             const std::vector<StyleTarget>& targets) {
  detail::require(!completions.empty(), "joint_accuracy: generations must be nonempty");
  std::size_t hits = 0;
  for (const auto& c : completions) {
    bool all = true;
    for (const auto& t : targets) {
      if (!target_satisfied(score_tokens(find_discriminator(discs, t.axis), c), t.target_class)) {
        all = false;
        break;
      }
    }
    hits += all ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(completions.size());
}

// Scores one generation against every discriminator. Axes named in
// `targets` are controlled; the remaining discriminators are reported as
// uncontrolled columns.
inline GenerationRecord make_record(const Generation& g, const std::vector<LinearDiscriminator>& discs,
                                    const std::vector<StyleTarget>& targets, const TabularPolicy& ref) {
  GenerationRecord rec;
  rec.generation = g;
  for (const auto& t : targets) {
    const auto& d = find_discriminator(discs, t.axis);
    const Logits l = score_tokens(d, g.completion);
    check_class(l, t.target_class, "make_record");
    rec.scores.push_back({t.axis, t.target_class, predict(l), softmax(l)[static_cast<std::size_t>(t.target_class)],
                          target_satisfied(l, t.target_class)});
  }
  for (const auto& d : discs) {
    const bool controlled = std::any_of(targets.begin(), targets.end(),
                                        [&](const StyleTarget& t) { return t.axis == d.axis_name; });
    if (controlled) continue;
    const Logits l = score_tokens(d, g.completion);
    const int pred = predict(l);
    rec.scores.push_back({d.axis_name, -1, pred, softmax(l)[static_cast<std::size_t>(pred)], false});
  }
  rec.perplexity = seq_perplexity(ref, g.prompt, g.completion);
  rec.dup_bigram = dup_bigram_rate(g.completion);
  return rec;
}

struct SourceBreakdown {
  std::size_t count = 0;
  std::vector<double> style_accuracy;  // aligned with targets
  double joint_accuracy = 0.0;
};

struct EvalReport {
  std::string name;
  std::vector<StyleTarget> targets;
  std::vector<double> style_accuracy;  // aligned with targets
  double joint_accuracy = 0.0;
  double mean_perplexity = 0.0;
  double mean_dup_bigram = 0.0;
  std::size_t count = 0;
  std::map<std::string, SourceBreakdown> by_source;
  // Uncontrolled axis -> fraction of generations predicted as each class.
  std::map<std::string, std::vector<double>> uncontrolled_class_rates;
};

// Aggregates records. Counts are order-independent; means can differ in the
// last bit when records are reordered.
inline EvalReport aggregate(const std::vector<GenerationRecord>& records, const std::vector<StyleTarget>& targets,
                            const std::vector<LinearDiscriminator>& discs, std::string name = "") {
  detail::require(!records.empty(), "full_report: generations must be nonempty");
  EvalReport rep;
  rep.name = std::move(name);
  rep.targets = targets;
  rep.count = records.size();
  rep.style_accuracy.assign(targets.size(), 0.0);
  std::map<std::string, std::vector<double>> src_hits;
  std::map<std::string, double> src_joint;
  for (const auto& r : records) {
    auto& bd = rep.by_source[r.generation.source];
    bd.count += 1;
    auto& hits = src_hits[r.generation.source];
    hits.resize(targets.size(), 0.0);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double h = r.scores[i].satisfied ? 1.0 : 0.0;
      rep.style_accuracy[i] += h;
      hits[i] += h;
    }
    const double joint = r.all_satisfied() ? 1.0 : 0.0;
    rep.joint_accuracy += joint;
    src_joint[r.generation.source] += joint;
    rep.mean_perplexity += r.perplexity;
    rep.mean_dup_bigram += r.dup_bigram;
    for (std::size_t i = targets.size(); i < r.scores.size(); ++i) {
      const auto& s = r.scores[i];
      auto& rates = rep.uncontrolled_class_rates[s.axis];
      if (rates.empty()) rates.assign(static_cast<std::size_t>(find_discriminator(discs, s.axis).num_classes), 0.0);
      rates[static_cast<std::size_t>(s.predicted)] += 1.0;
    }
  }
  const auto n = static_cast<double>(records.size());
  for (double& a : rep.style_accuracy) a /= n;
  rep.joint_accuracy /= n;
  rep.mean_perplexity /= n;
  rep.mean_dup_bigram /= n;
  for (auto& [src, bd] : rep.by_source) {
    const auto c = static_cast<double>(bd.count);
    bd.style_accuracy = src_hits[src];
    for (double& a : bd.style_accuracy) a /= c;
    bd.joint_accuracy = src_joint[src] / c;
  }
  for (auto& [axis, rates] : rep.uncontrolled_class_rates)
    for (double& r : rates) r /= n;
  return rep;
}

inline EvalReport full_report(const std::vector<Generation>& gens, const std::vector<LinearDiscriminator>& discs,
                              const std::vector<StyleTarget>& targets, const TabularPolicy& ref,
                              std::vector<GenerationRecord>* records_out = nullptr, std::string name = "") {
  detail::require(!gens.empty(), "full_report: generations must be nonempty");
  std::vector<GenerationRecord> records;
  records.reserve(gens.size());
  for (const auto& g : gens) records.push_back(make_record(g, discs, targets, ref));
  auto rep = aggregate(records, targets, discs, std::move(name));
  if (records_out) *records_out = std::move(records);
  return rep;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double pearson_r = 0.0;
};

// Ordinary least squares of y on x plus Pearson r. Zero variance in either
// variable is an error (r would be undefined).
inline LinearFit correlate_frequency(std::span<const double> y_joint_accuracy, std::span<const double> x_frequency) {
  detail::require_dims(y_joint_accuracy.size() == x_frequency.size(), "correlate_frequency: length mismatch");
  detail::require(x_frequency.size() >= 2, "correlate_frequency: need at least two points");
  const double mx = mean(x_frequency), my = mean(y_joint_accuracy);
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x_frequency.size(); ++i) {
    const double dx = x_frequency[i] - mx, dy = y_joint_accuracy[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  detail::require(sxx > 0.0, "correlate_frequency: corpus frequencies have zero variance");
  detail::require(syy > 0.0, "correlate_frequency: joint accuracies have zero variance");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.pearson_r = sxy / std::sqrt(sxx * syy);
  return f;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string targets_label(const std::vector<StyleTarget>& targets) {
  std::string out;
  for (const auto& t : targets) {
    if (!out.empty()) out += '+';
    out += t.axis + "=" + std::to_string(t.target_class);
  }
  return out;
}

inline nlohmann::json to_json(const GenerationRecord& r) {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& s : r.scores) {
    scores.push_back({{"axis", s.axis},
                      {"target_class", s.target_class},
                      {"predicted", s.predicted},
                      {"prob", s.target_prob},
                      {"satisfied", s.satisfied}});
  }
  return {{"prompt", r.generation.prompt},
          {"completion", r.generation.completion},
          {"source", r.generation.source},
          {"scores", scores},
          {"perplexity", r.perplexity},
          {"dup_bigram", r.dup_bigram}};
}

inline nlohmann::json to_json(const EvalReport& rep) {
  nlohmann::json styles = nlohmann::json::array();
  for (std::size_t i = 0; i < rep.targets.size(); ++i) {
    styles.push_back({{"axis", rep.targets[i].axis},
                      {"target_class", rep.targets[i].target_class},
                      {"accuracy", rep.style_accuracy[i]}});
  }
  nlohmann::json sources = nlohmann::json::object();
  for (const auto& [src, bd] : rep.by_source) {
    sources[src] = {{"count", bd.count}, {"style_accuracy", bd.style_accuracy}, {"joint_accuracy", bd.joint_accuracy}};
  }
  nlohmann::json unc = nlohmann::json::object();
  for (const auto& [axis, rates] : rep.uncontrolled_class_rates) unc[axis] = rates;
  return {{"name", rep.name},
          {"count", rep.count},
          {"style_accuracy", styles},
          {"joint_accuracy", rep.joint_accuracy},
          {"mean_perplexity", rep.mean_perplexity},
          {"mean_dup_bigram", rep.mean_dup_bigram},
          {"by_source", sources},
          {"uncontrolled_class_rates", unc}};
}

inline std::string csv_header(std::size_t num_targets) {
  std::string h = "name,targets";
  for (std::size_t i = 0; i < num_targets; ++i) h += ",style_acc_" + std::to_string(i);
  h += ",joint_accuracy,mean_perplexity,mean_dup_bigram,count";
  return h;
}

inline std::string csv_row(const EvalReport& rep) {
  std::ostringstream os;
  os.precision(6);
  os << rep.name << ',' << targets_label(rep.targets);
  for (double a : rep.style_accuracy) os << ',' << a;
  os << ',' << rep.joint_accuracy << ',' << rep.mean_perplexity << ',' << rep.mean_dup_bigram << ',' << rep.count;
  return os.str();
}

}  // namespace multistyle
