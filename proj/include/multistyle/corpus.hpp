#pragma once

// Synthetic styled token corpora.
//
// A sequence carries one class label per style axis. Labels are drawn jointly
// from a co-occurrence table; tokens are then drawn from a mixture of the
// background distribution of the sequence's source domain and the lexicons of
// its labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/error.hpp"
#include "multistyle/rng.hpp"

namespace multistyle {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

struct StyleAxis {
  std::string name;
  std::vector<std::string> class_names;
  // One lexicon per class. Only the neutral class may have an empty lexicon;
  // its style draws fall back to the background distribution.
  std::vector<std::vector<Token>> class_lexicons;
  std::optional<int> neutral_class;

  int num_classes() const { return static_cast<int>(class_lexicons.size()); }

  int class_index(const std::string& label) const {
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      if (class_names[i] == label) return static_cast<int>(i);
    }
    return -1;
  }

  static StyleAxis binary(std::string name, std::vector<std::string> names, std::vector<Token> positive,
                          std::vector<Token> negative) {
    StyleAxis a;
    a.name = std::move(name);
    a.class_names = std::move(names);
    a.class_lexicons = {std::move(positive), std::move(negative)};
    return a;
  }
};

// Target class on one axis. The axis name doubles as the discriminator id.
struct StyleTarget {
  std::string axis;
  int target_class = 0;

  friend bool operator==(const StyleTarget&, const StyleTarget&) = default;
};

struct CorpusSpec {
  int vocab_size = 64;
  std::vector<StyleAxis> axes;
  // Joint label probabilities, row-major over axes in declaration order
  // (last axis varies fastest). Empty means the product of uniform marginals.
  std::vector<double> cooccurrence;
  int min_length = 16;
  int max_length = 32;
  int num_sequences = 2000;
  std::uint64_t seed = 1;
  double p_style = 0.35;
  std::vector<std::string> sources = {"news", "forum"};

  std::size_t num_label_tuples() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= static_cast<std::size_t>(a.num_classes());
    return n;
  }
};

struct LabeledSequence {
  TokenSeq tokens;
  std::map<std::string, int> labels;
  std::string source;

  friend bool operator==(const LabeledSequence&, const LabeledSequence&) = default;
};

struct Prompt {
  TokenSeq tokens;
  std::string source;
};

inline std::vector<double> resolved_cooccurrence(const CorpusSpec& spec) {
  if (!spec.cooccurrence.empty()) return spec.cooccurrence;
  const std::size_t n = spec.num_label_tuples();
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

// Decode a flat co-occurrence index into one class per axis.
inline std::vector<int> label_tuple(const CorpusSpec& spec, std::size_t index) {
  std::vector<int> out(spec.axes.size());
  for (std::size_t a = spec.axes.size(); a-- > 0;) {
    const auto k = static_cast<std::size_t>(spec.axes[a].num_classes());
    out[a] = static_cast<int>(index % k);
    index /= k;
  }
  return out;
}

inline std::size_t label_tuple_index(const CorpusSpec& spec, const std::vector<int>& labels) {
  std::size_t idx = 0;
  for (std::size_t a = 0; a < spec.axes.size(); ++a) {
    idx = idx * static_cast<std::size_t>(spec.axes[a].num_classes()) + static_cast<std::size_t>(labels[a]);
  }
  return idx;
}

inline void validate(const CorpusSpec& spec) {
  using detail::require;
  require(spec.vocab_size >= 8, "CorpusSpec: vocab_size must be >= 8");
  require(spec.min_length >= 4, "CorpusSpec: min length must be >= 4");
  require(spec.max_length >= spec.min_length, "CorpusSpec: max length must be >= min length");
  require(spec.num_sequences >= 0, "CorpusSpec: num_sequences must be >= 0");
  require(spec.p_style >= 0.0 && spec.p_style <= 1.0, "CorpusSpec: p_style must lie in [0,1]");
  require(!spec.axes.empty(), "CorpusSpec: at least one style axis is required");
  require(!spec.sources.empty(), "CorpusSpec: at least one source is required");
  std::set<Token> seen;
  std::set<std::string> names;
  for (const auto& axis : spec.axes) {
    require(!axis.name.empty(), "StyleAxis: name must be nonempty");
    require(names.insert(axis.name).second, "StyleAxis: duplicate axis name '" + axis.name + "'");
    require(axis.num_classes() >= 2, "StyleAxis '" + axis.name + "': num_classes must be >= 2");
    require(axis.class_names.empty() || axis.class_names.size() == axis.class_lexicons.size(),
            "StyleAxis '" + axis.name + "': class_names must match the number of lexicons");
    for (int c = 0; c < axis.num_classes(); ++c) {
      const auto& lex = axis.class_lexicons[static_cast<std::size_t>(c)];
      const bool neutral = axis.neutral_class && *axis.neutral_class == c;
      require(neutral || !lex.empty(), "StyleAxis '" + axis.name + "': lexicons must be nonempty");
      for (Token t : lex) {
        require(t >= 0 && t < spec.vocab_size, "StyleAxis '" + axis.name + "': token ids must be < vocab_size");
        require(seen.insert(t).second, "StyleAxis '" + axis.name + "': lexicons must be disjoint");
      }
    }
  }
  const auto co = resolved_cooccurrence(spec);
  require(co.size() == spec.num_label_tuples(),
          "CorpusSpec: cooccurrence must have one entry per label tuple");
  double total = 0.0;
  for (double p : co) {
    require(std::isfinite(p) && p >= 0.0, "CorpusSpec: cooccurrence entries must be >= 0");
    total += p;
  }
  require(std::abs(total - 1.0) < 1e-9, "CorpusSpec: cooccurrence entries must sum to 1");
}

// Tokens that belong to no lexicon.
inline std::vector<Token> filler_tokens(const CorpusSpec& spec) {
  std::set<Token> lex;
  for (const auto& a : spec.axes)
    for (const auto& l : a.class_lexicons) lex.insert(l.begin(), l.end());
  std::vector<Token> out;
  for (Token t = 0; t < spec.vocab_size; ++t)
    if (!lex.count(t)) out.push_back(t);
  return out;
}

namespace detail {

// The first source draws uniformly over the vocabulary; every further source
// puts `extra` of its mass on a source-specific slice of the filler tokens.
inline Token draw_background(const CorpusSpec& spec, const std::vector<Token>& filler, std::size_t source,
                             Rng& rng) {
  if (source > 0 && !filler.empty() && uniform01(rng) < 0.5) {
    const std::size_t slices = spec.sources.size() - 1;
    const std::size_t begin = (source - 1) * filler.size() / slices;
    std::size_t end = source * filler.size() / slices;
    if (end <= begin) end = begin + 1;
    return filler[begin + uniform_index(rng, end - begin)];
  }
  return static_cast<Token>(uniform_index(rng, static_cast<std::size_t>(spec.vocab_size)));
}

inline std::vector<LabeledSequence> sample_sequences(const CorpusSpec& spec, std::uint64_t seed, int count) {
  Rng rng(seed);
  const auto co = resolved_cooccurrence(spec);
  const auto filler = filler_tokens(spec);
  std::vector<LabeledSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    LabeledSequence seq;
    const auto labels = label_tuple(spec, sample_categorical(co, uniform01(rng)));
    const std::size_t source = uniform_index(rng, spec.sources.size());
    seq.source = spec.sources[source];
    for (std::size_t a = 0; a < spec.axes.size(); ++a) seq.labels[spec.axes[a].name] = labels[a];
    const int span = spec.max_length - spec.min_length + 1;
    const int len = spec.min_length + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(span)));
    seq.tokens.reserve(static_cast<std::size_t>(len));
    for (int t = 0; t < len; ++t) {
      if (uniform01(rng) < spec.p_style) {
        const std::size_t a = uniform_index(rng, spec.axes.size());
        const auto& lex = spec.axes[a].class_lexicons[static_cast<std::size_t>(labels[a])];
        if (!lex.empty()) {
          seq.tokens.push_back(lex[uniform_index(rng, lex.size())]);
          continue;
        }
      }
      seq.tokens.push_back(draw_background(spec, filler, source, rng));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace detail

inline std::vector<LabeledSequence> generate_corpus(const CorpusSpec& spec) {
  validate(spec);
  return detail::sample_sequences(spec, derive_seed(spec.seed, 0x636f72707573ULL), spec.num_sequences);
}

// Held-out corpus drawn from the same distribution with an independent stream.
inline std::vector<LabeledSequence> generate_heldout(const CorpusSpec& spec, int count) {
  validate(spec);
  return detail::sample_sequences(spec, derive_seed(spec.seed, 0x68656c646f7574ULL), count);
}

// Prefixes of held-out sequences. The held-out pool holds num_sequences items.
inline std::vector<Prompt> generate_prompts(const CorpusSpec& spec, int count, int prefix_len = 4) {
  detail::require(prefix_len >= 1, "generate_prompts: prefix_len must be >= 1");
  detail::require(prefix_len <= spec.min_length, "generate_prompts: prefix_len exceeds the minimum sequence length");
  detail::require(count >= 0, "generate_prompts: count must be >= 0");
  if (count > spec.num_sequences) {
    throw ValidationError("generate_prompts: count " + std::to_string(count) + " exceeds the " +
                          std::to_string(spec.num_sequences) + " available held-out sequences");
  }
  auto pool = generate_heldout(spec, spec.num_sequences);
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(spec.seed, 0x70726f6d7074ULL));
  shuffle(std::span<std::size_t>(order), rng);
  std::vector<Prompt> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto& seq = pool[order[static_cast<std::size_t>(i)]];
    out.push_back({TokenSeq(seq.tokens.begin(), seq.tokens.begin() + prefix_len), seq.source});
  }
  return out;
}

// Fraction of sequences whose labels match every target. An empty target
// list is satisfied by every sequence.
inline double combination_frequency(const std::vector<LabeledSequence>& corpus,
                                    const std::vector<StyleTarget>& targets) {
  for (const auto& t : targets) {
    for (const auto& seq : corpus) {
      if (!seq.labels.count(t.axis)) throw ValidationError("combination_frequency: unknown axis '" + t.axis + "'");
    }
  }
  if (targets.empty()) return 1.0;
  if (corpus.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& seq : corpus) {
    bool all = std::all_of(targets.begin(), targets.end(),
                           [&](const StyleTarget& t) { return seq.labels.at(t.axis) == t.target_class; });
    hits += all ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

// Deterministic train / held-out split; `heldout_fraction` of the items go to
// the second half.
inline std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split_corpus(
    const std::vector<LabeledSequence>& corpus, double heldout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  shuffle(std::span<std::size_t>(order), rng);
  const auto n_held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(corpus.size())));
  std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < order.size() - n_held ? out.first : out.second).push_back(corpus[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON / JSONL

inline nlohmann::json to_json(const LabeledSequence& s) {
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [k, v] : s.labels) labels[k] = v;
  return {{"tokens", s.tokens}, {"labels", labels}, {"source", s.source}};
}

inline LabeledSequence labeled_sequence_from_json(const nlohmann::json& j) {
  LabeledSequence s;
  s.tokens = j.at("tokens").get<TokenSeq>();
  for (const auto& [k, v] : j.at("labels").items()) s.labels[k] = v.get<int>();
  s.source = j.at("source").get<std::string>();
  return s;
}

inline std::string to_jsonl(const std::vector<LabeledSequence>& corpus) {
  std::string out;
  for (const auto& s : corpus) {
    out += to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<LabeledSequence> corpus_from_jsonl(const std::string& text) {
  std::vector<LabeledSequence> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    if (end > pos) out.push_back(labeled_sequence_from_json(nlohmann::json::parse(text.substr(pos, end - pos))));
    pos = end + 1;
  }
  return out;
}

inline nlohmann::json to_json(const StyleAxis& a) {
  nlohmann::json j = {{"name", a.name}, {"classes", a.class_names}, {"lexicons", a.class_lexicons}};
  if (a.neutral_class) j["neutral_class"] = *a.neutral_class;
  return j;
}

inline nlohmann::json to_json(const CorpusSpec& s) {
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : s.axes) axes.push_back(to_json(a));
  return {{"vocab_size", s.vocab_size},
          {"axes", axes},
          {"cooccurrence", resolved_cooccurrence(s)},
          {"length_range", {s.min_length, s.max_length}},
          {"num_sequences", s.num_sequences},
          {"seed", s.seed},
          {"p_style", s.p_style},
          {"sources", s.sources}};
}

}  // namespace multistyle
