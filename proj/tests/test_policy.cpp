#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "multistyle/policy.hpp"
#include "test_util.hpp"

namespace {

using namespace multistyle;
using mstest::random_vector;

TabularPolicy random_policy(int v, int order, std::uint64_t seed, double scale = 1.5) {
  std::mt19937_64 rng(seed);
  auto p = TabularPolicy::zeros(v, order);
  p.logits = random_vector(rng, p.logits.size(), scale);
  return p;
}

TEST(ContextTable, BosPaddingAndIndexing) {
  ContextTable t{4, 2};
  EXPECT_EQ(t.num_contexts(), 25u);
  EXPECT_EQ(t.context_index(TokenSeq{}), 4u * 5 + 4);  // (BOS, BOS)
  EXPECT_EQ(t.context_index(TokenSeq{2}), 4u * 5 + 2);  // (BOS, 2)
  EXPECT_EQ(t.context_index(TokenSeq{2, 1, 3}), 1u * 5 + 3);
  EXPECT_THROW(t.context_index(TokenSeq{5}), ValidationError);
}

TEST(NextLogits, Cases) {
  auto p = TabularPolicy::zeros(6, 2);
  const auto u = softmax(next_logits(p, TokenSeq{1, 2}));
  for (double x : u) EXPECT_DOUBLE_EQ(x, 1.0 / 6.0);
  p.row(p.shape.context_index(TokenSeq{1, 2}))[4] = 20.0;
  EXPECT_GT(softmax(next_logits(p, TokenSeq{1, 2}))[4], 0.999999);

  const auto r = random_policy(5, 2, 1);
  const auto got = next_logits(r, TokenSeq{3, 0, 4});
  for (std::size_t a = 0; a < 5; ++a) EXPECT_EQ(got[a], r.logits[(0 * 6 + 4) * 5 + a]);
  EXPECT_THROW(next_logits(r, TokenSeq{7}), ValidationError);
}

TEST(Sample, DeterministicPolicyAndSeed) {
  auto p = TabularPolicy::zeros(4, 1);
  for (std::size_t c = 0; c < p.shape.num_contexts(); ++c) p.row(c)[(c + 1) % 4] = 800.0;
  const auto a = sample(p, TokenSeq{0}, 6, 1), b = sample(p, TokenSeq{0}, 6, 99);
  EXPECT_EQ(a.generated, (TokenSeq{1, 2, 3, 0, 1, 2}));
  EXPECT_EQ(a.generated, b.generated);

  const auto r = random_policy(7, 2, 2);
  const auto x = sample(r, TokenSeq{1, 2}, 24, 5), y = sample(r, TokenSeq{1, 2}, 24, 5);
  EXPECT_EQ(x.generated, y.generated);
  EXPECT_EQ(x.logprobs_policy, y.logprobs_policy);
  EXPECT_EQ(x.generated.size(), 24u);
  EXPECT_THROW(sample(r, TokenSeq{}, 0, 1), ValidationError);
}

TEST(Sample, EmpiricalFrequenciesMatchSoftmax) {
  const auto p = random_policy(5, 1, 3);
  const TokenSeq prompt{2};
  const auto probs = softmax(next_logits(p, prompt));
  std::vector<double> counts(5, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample(p, prompt, 1, derive_seed(7, i)).generated[0])] += 1;
  for (std::size_t a = 0; a < 5; ++a) EXPECT_NEAR(counts[a] / n, probs[a], 0.01);
}

TEST(Logprob, Cases) {
  auto p = TabularPolicy::zeros(4, 1);
  for (std::size_t c = 0; c < p.shape.num_contexts(); ++c) p.row(c)[2] = 800.0;
  for (double lp : logprob(p, TokenSeq{1}, TokenSeq{2, 2, 2})) EXPECT_NEAR(lp, 0.0, 1e-12);

  const auto u = TabularPolicy::zeros(9, 2);
  for (double lp : logprob(u, TokenSeq{}, TokenSeq{0, 8, 3})) EXPECT_NEAR(lp, -std::log(9.0), 1e-15);
  EXPECT_THROW(logprob(u, TokenSeq{}, TokenSeq{9}), ValidationError);
}

TEST(Logprob, ReplayIsBitIdentical) {
  const auto p = random_policy(8, 2, 4);
  for (int i = 0; i < 50; ++i) {
    const auto r = sample(p, TokenSeq{3, 1, 4}, 24, derive_seed(9, i));
    EXPECT_EQ(logprob(p, r.prompt, r.generated), r.logprobs_policy);
    for (double lp : r.logprobs_policy) EXPECT_LE(lp, 0.0);
  }
}

TEST(Logprob, RowsNormalize) {
  const auto p = random_policy(6, 2, 5, 4.0);
  for (std::size_t c = 0; c < p.shape.num_contexts(); ++c) {
    double s = 0;
    for (double lp : log_softmax(p.row(c))) s += std::exp(lp);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Perplexity, Cases) {
  EXPECT_DOUBLE_EQ(seq_perplexity(TabularPolicy::zeros(4, 2), TokenSeq{1}, TokenSeq{0, 1, 2, 3}), 4.0);
  EXPECT_DOUBLE_EQ(seq_perplexity(TabularPolicy::zeros(64, 1), TokenSeq{}, TokenSeq{5, 9}), 64.0);

  auto det = TabularPolicy::zeros(3, 1);
  for (std::size_t c = 0; c < det.shape.num_contexts(); ++c) det.row(c)[1] = 800.0;
  EXPECT_NEAR(seq_perplexity(det, TokenSeq{}, TokenSeq{1, 1, 1}), 1.0, 1e-12);

  // Order 1, vocab 2, row for context `0` is [log 3, 0] -> p(0|0) = 3/4,
  // other rows uniform. Sequence after prompt {0}: 0, 1, 1.
  //   p = 3/4 * 1/4 * 1/2  ->  PPL = (3/32)^(-1/3)
  auto hand = TabularPolicy::zeros(2, 1);
  hand.row(0)[0] = std::log(3.0);
  EXPECT_NEAR(seq_perplexity(hand, TokenSeq{0}, TokenSeq{0, 1, 1}), std::pow(3.0 / 32.0, -1.0 / 3.0), 1e-12);
  EXPECT_THROW(seq_perplexity(hand, TokenSeq{0}, TokenSeq{}), ValidationError);
}

TEST(PolicyGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 100; ++i) {
    auto p = random_policy(5, 1, 100 + i);
    const std::size_t ctx = rng() % p.shape.num_contexts();
    const auto a = static_cast<Token>(rng() % 5);
    const Vector g = logprob_row_gradient(p, ctx, a);
    double err = 0;
    for (std::size_t b = 0; b < 5; ++b) {
      const std::size_t idx = ctx * 5 + b;
      const double saved = p.logits[idx];
      p.logits[idx] = saved + 1e-5;
      const double up = log_softmax(p.row(ctx))[static_cast<std::size_t>(a)];
      p.logits[idx] = saved - 1e-5;
      const double down = log_softmax(p.row(ctx))[static_cast<std::size_t>(a)];
      p.logits[idx] = saved;
      err = std::max(err, std::abs(g[b] - (up - down) / 2e-5) / std::max(1e-3, std::abs(g[b])));
    }
    EXPECT_LT(err, 1e-6);
  }
}

TEST(TrainLm, SmoothedCounts) {
  std::vector<LabeledSequence> one(20, LabeledSequence{{0, 1, 0, 1, 0, 1}, {}, "news"});
  const auto p = train_lm(TabularPolicy::zeros(8, 1), one);
  // After a 0 the data always continue with 1: (60 + 0.1) / (60 + 0.8)
  EXPECT_NEAR(softmax(next_logits(p, TokenSeq{0}))[1], 60.1 / 60.8, 1e-12);
  // BOS context saw 20 zeros.
  EXPECT_NEAR(std::exp(next_logits(p, TokenSeq{})[0]), 20.1 / 20.8, 1e-12);
  EXPECT_EQ(p.version, 1u);
  EXPECT_THROW(train_lm(TabularPolicy::zeros(8, 1), {}), ValidationError);
}

TEST(TrainLm, UniformCorpusGivesNearUniformPolicy) {
  std::mt19937_64 rng(7);
  std::vector<LabeledSequence> corpus(2000);
  for (auto& s : corpus) {
    s.tokens.resize(20);
    for (auto& t : s.tokens) t = static_cast<Token>(rng() % 8);
  }
  const auto p = train_lm(TabularPolicy::zeros(8, 1), corpus);
  double lp = 0, n = 0;
  for (int i = 0; i < 200; ++i) {
    TokenSeq seq(20);
    for (auto& t : seq) t = static_cast<Token>(rng() % 8);
    for (double x : logprob(p, {}, seq)) {
      lp += x;
      n += 1;
    }
  }
  EXPECT_NEAR(std::exp(-lp / n), 8.0, 0.1);
}

TEST(TrainLm, HeldOutPerplexityBelowVocab) {
  auto spec = mstest::two_axis_spec(3000);
  const auto corpus = generate_corpus(spec);
  const auto held = generate_heldout(spec, 300);
  const auto p = train_lm(TabularPolicy::zeros(64, 1), corpus);
  double lp = 0, n = 0;
  for (const auto& s : held)
    for (double x : logprob(p, {}, s.tokens)) {
      lp += x;
      n += 1;
    }
  EXPECT_LT(std::exp(-lp / n), 64.0);
}

TEST(Checkpoint, PolicyAndValueRoundTrip) {
  auto p = random_policy(6, 2, 8);
  p.version = 12;
  const auto back = policy_from_json(nlohmann::json::parse(to_json(p).dump()));
  EXPECT_EQ(back.logits, p.logits);
  EXPECT_EQ(back.version, 12u);
  EXPECT_EQ(back.shape.order, 2);

  auto v = ValueTable::zeros(6, 2);
  v.values[3] = -1.25;
  EXPECT_EQ(value_table_from_json(to_json(v)).values, v.values);

  auto j = to_json(p);
  j["logits"].erase(0);
  EXPECT_THROW(policy_from_json(j), DimensionError);
  j = to_json(p);
  j["format"] = "something_else";
  EXPECT_THROW(policy_from_json(j), ValidationError);
}

}  // namespace
