#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "multistyle/pplm.hpp"
#include "test_util.hpp"

namespace {

using namespace multistyle;
using mstest::random_vector;

HeadDiscriminator random_head(std::mt19937_64& rng, std::string axis, int classes, int hidden) {
  HeadDiscriminator h{std::move(axis), classes, Matrix(static_cast<std::size_t>(classes), static_cast<std::size_t>(hidden)),
                      Vector(static_cast<std::size_t>(classes), 0.0)};
  h.weights.data = random_vector(rng, h.weights.data.size(), 1.0);
  h.bias = random_vector(rng, h.bias.size(), 0.5);
  return h;
}

class Steering : public ::testing::Test {
 protected:
  void SetUp() override {
    lm = RecurrentLm::random(6, 3, 5, 17, 0.8);
    std::mt19937_64 rng(18);
    heads = {random_head(rng, "a", 2, 5), random_head(rng, "b", 3, 5)};
    targets = {{"a", 1}, {"b", 2}};
  }
  RecurrentLm lm;
  std::vector<HeadDiscriminator> heads;
  std::vector<StyleTarget> targets;
};

TEST_F(Steering, ZeroStepOrZeroIterationsIsIdentity) {
  const TokenSeq prompt{1, 2, 3};
  PplmConfig off;
  off.steps_per_token = 0;
  PplmConfig still;
  still.step_size = 0.0;
  PplmConfig on;
  on.step_size = 0.5;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto base = pplm_decode_trace(lm, heads, targets, prompt, 12, off, seed);
    EXPECT_EQ(pplm_decode(lm, heads, targets, prompt, 12, still, seed), base.tokens);
    for (double tv : base.tv_distances) EXPECT_EQ(tv, 0.0);
    // Sampling is driven by one uniform per token regardless of the config.
    EXPECT_EQ(pplm_decode(lm, heads, targets, prompt, 12, on, seed).size(), base.tokens.size());
  }
  std::mt19937_64 rng(19);
  const Vector h = random_vector(rng, 5, 0.5);
  const Vector p = softmax(output_logits(lm, h));
  EXPECT_EQ(steer_step(lm, h, heads, targets, p, still), h);
}

TEST_F(Steering, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(20);
  for (double lambda : {0.0, 0.01, 1.0}) {
    PplmConfig cfg;
    cfg.kl_coef = lambda;
    for (int trial = 0; trial < 20; ++trial) {
      Vector h = random_vector(rng, 5, 0.5);
      const Vector p = softmax(output_logits(lm, random_vector(rng, 5, 0.5)));
      const Vector g = pplm_gradient(lm, h, heads, targets, p, cfg);
      for (std::size_t i = 0; i < h.size(); ++i) {
        const double fd = mstest::central_diff(
            [&](const Vector& x) { return pplm_loss(lm, x, heads, targets, p, cfg); }, h, i, 1e-6);
        EXPECT_LT(std::abs(g[i] - fd), 1e-5 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_F(Steering, SmallStepLowersLoss) {
  std::mt19937_64 rng(21);
  PplmConfig cfg;
  cfg.step_size = 1e-4;
  for (int trial = 0; trial < 100; ++trial) {
    const Vector h = random_vector(rng, 5, 0.5);
    const Vector p = softmax(output_logits(lm, h));
    const double before = pplm_loss(lm, h, heads, targets, p, cfg);
    const double after = pplm_loss(lm, steer_step(lm, h, heads, targets, p, cfg), heads, targets, p, cfg);
    EXPECT_LE(after, before);
  }
}

TEST_F(Steering, ClippedStepLength) {
  std::mt19937_64 rng(22);
  PplmConfig cfg;
  cfg.step_size = 0.3;
  cfg.max_grad_norm = 1e-3;
  const Vector h = random_vector(rng, 5, 0.5);
  const Vector p = softmax(output_logits(lm, h));
  const Vector h2 = steer_step(lm, h, heads, targets, p, cfg);
  double d = 0;
  for (std::size_t i = 0; i < h.size(); ++i) d += (h2[i] - h[i]) * (h2[i] - h[i]);
  EXPECT_NEAR(std::sqrt(d), 0.3 * 1e-3, 1e-12);
}

TEST_F(Steering, StrongerKlKeepsDistributionCloser) {
  PplmConfig loose, tight;
  loose.kl_coef = 0.01;
  tight.kl_coef = 100.0;
  loose.step_size = tight.step_size = 0.5;
  double tv_loose = 0, tv_tight = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (double x : pplm_decode_trace(lm, heads, targets, TokenSeq{0}, 8, loose, seed).tv_distances) tv_loose += x;
    for (double x : pplm_decode_trace(lm, heads, targets, TokenSeq{0}, 8, tight, seed).tv_distances) tv_tight += x;
  }
  EXPECT_LT(tv_tight, tv_loose);
}

TEST(Divergences, Properties) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 1000; ++i) {
    const Vector p = softmax(random_vector(rng, 7)), q = softmax(random_vector(rng, 7));
    EXPECT_GE(kl_divergence(p, q), 0.0);
    EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-15);
    const double tv = total_variation(p, q);
    EXPECT_GE(tv, 0.0);
    EXPECT_LE(tv, 1.0);
    EXPECT_DOUBLE_EQ(tv, total_variation(q, p));
  }
  EXPECT_DOUBLE_EQ(total_variation(Vector{1, 0}, Vector{0, 1}), 1.0);
  EXPECT_NEAR(kl_divergence(Vector{0.5, 0.5}, Vector{0.25, 0.75}), 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0),
              1e-15);
}

TEST(Rnn, ZeroWeightsGiveTanhBias) {
  auto lm = RecurrentLm::random(4, 2, 3, 1, 0.0);
  lm.b = {0.5, -1.0, 0.0};
  const Vector h = rnn_step(lm, Vector{0.3, 0.3, 0.3}, 2);
  EXPECT_DOUBLE_EQ(h[0], std::tanh(0.5));
  EXPECT_DOUBLE_EQ(h[1], std::tanh(-1.0));
  EXPECT_DOUBLE_EQ(h[2], 0.0);
  // Uniform output: loss log V per token.
  EXPECT_NEAR(rnn_sequence_loss(lm, TokenSeq{0, 1, 2}), std::log(4.0), 1e-15);
  EXPECT_EQ(rnn_sequence_loss(lm, TokenSeq{}), 0.0);
}

TEST(Rnn, GradientMatchesFiniteDifferences) {
  auto lm = RecurrentLm::random(5, 3, 4, 9, 0.7);
  std::mt19937_64 rng(24);
  lm.b = random_vector(rng, 4, 0.3);
  lm.head_bias = random_vector(rng, 5, 0.3);
  const TokenSeq seq{3, 0, 4};
  std::array<Vector, 6> grad;
  auto blocks = lm.blocks();
  for (std::size_t k = 0; k < 6; ++k) grad[k].assign(blocks[k]->size(), 0.0);
  rnn_accumulate_gradient(lm, seq, 1.0, grad);
  for (std::size_t k = 0; k < 6; ++k) {
    for (std::size_t i = 0; i < blocks[k]->size(); ++i) {
      const double fd = mstest::central_diff(
          [&](const Vector& x) {
            RecurrentLm m = lm;
            *m.blocks()[k] = x;
            return rnn_sequence_loss(m, seq);
          },
          *blocks[k], i, 1e-6);
      EXPECT_LT(std::abs(grad[k][i] - fd), 1e-7 + 1e-5 * std::abs(fd)) << "block " << k << " index " << i;
    }
  }
}

TEST(Rnn, TrainingLossNeverIncreases) {
  auto corpus = generate_corpus(mstest::two_axis_spec(200, 5));
  RnnTrainConfig cfg;
  cfg.epochs = 4;
  cfg.learning_rate = 0.05;
  std::vector<double> losses;
  train_rnn(RecurrentLm::random(64, 4, 8, 3), corpus, cfg, &losses);
  ASSERT_EQ(losses.size(), 5u);
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1]);
  EXPECT_LT(losses.back(), std::log(64.0));
}

TEST(Rnn, OutOfVocabularyIsRejected) {
  const auto lm = RecurrentLm::random(4, 2, 3, 1);
  EXPECT_THROW(rnn_sequence_loss(lm, TokenSeq{4}), ValidationError);
  EXPECT_THROW(RecurrentLm::random(1, 2, 3, 1), ValidationError);
}

TEST(Rnn, CheckpointsRoundTrip) {
  const auto lm = RecurrentLm::random(6, 3, 5, 4);
  const auto back = recurrent_lm_from_json(nlohmann::json::parse(to_json(lm).dump()));
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(*back.blocks()[k], *lm.blocks()[k]);

  std::mt19937_64 rng(25);
  const auto head = random_head(rng, "sentiment", 2, 5);
  const auto h2 = head_from_json(nlohmann::json::parse(to_json(head).dump()));
  EXPECT_EQ(h2.axis_name, "sentiment");
  EXPECT_EQ(h2.weights.data, head.weights.data);
  EXPECT_EQ(h2.bias, head.bias);

  auto bad = to_json(lm);
  bad["format"] = "nope";
  EXPECT_THROW(recurrent_lm_from_json(bad), ValidationError);
}

TEST(PplmConfigTest, Validation) {
  PplmConfig c;
  EXPECT_NO_THROW(validate(c));
  c.kl_coef = -1;
  EXPECT_THROW(validate(c), ValidationError);
  c = {};
  c.max_grad_norm = 0;
  EXPECT_THROW(validate(c), ValidationError);
}

}  // namespace
