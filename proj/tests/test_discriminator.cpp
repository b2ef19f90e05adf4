#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "multistyle/discriminator.hpp"
#include "test_util.hpp"

namespace {

using namespace multistyle;
using mstest::central_diff;
using mstest::random_vector;

// Discriminator whose logits equal its (C-dimensional) input features.
LinearDiscriminator identity_disc(int classes) {
  auto d = LinearDiscriminator::zeros("probe", classes, FeatureSpec{classes, {1}, false});
  for (int c = 0; c < classes; ++c) d.weights(static_cast<std::size_t>(c), static_cast<std::size_t>(c)) = 1.0;
  return d;
}

// Labels sampled from the discriminator's own softmax, so it is calibrated
// by construction.
std::vector<LabeledExample> self_labeled(const LinearDiscriminator& d, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LabeledExample> out;
  for (int i = 0; i < n; ++i) {
    Vector fv = random_vector(rng, d.weights.cols, 1.0);
    const Vector p = softmax(disc_logits(d, fv));
    out.push_back({fv, static_cast<int>(sample_categorical(p, u(rng)))});
  }
  return out;
}

TEST(DiscLogits, Cases) {
  auto d = LinearDiscriminator::zeros("x", 2, FeatureSpec{3, {1}, true});
  d.bias = {1.0, -1.0};
  EXPECT_EQ(disc_logits(d, Vector{0.2, 0.3, 0.5}), (Vector{1.0, -1.0}));

  d.weights.data = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(disc_logits(d, Vector{0, 1, 0}), (Vector{3.0, 4.0}));
  EXPECT_THROW(disc_logits(d, Vector{1, 0}), DimensionError);
}

TEST(DiscLogits, MatchesNaiveMatmul) {
  std::mt19937_64 rng(1);
  auto d = LinearDiscriminator::zeros("x", 5, FeatureSpec{13, {1}, true});
  d.weights.data = random_vector(rng, d.weights.data.size());
  d.bias = random_vector(rng, 5);
  const Vector fv = random_vector(rng, 13);
  const Vector got = disc_logits(d, fv);
  for (std::size_t c = 0; c < 5; ++c) {
    double s = d.bias[c];
    for (std::size_t f = 0; f < 13; ++f) s += d.weights.data[c * 13 + f] * fv[f];
    EXPECT_NEAR(got[c], s, 1e-12);
  }
}

TEST(Softmax, Cases) {
  EXPECT_EQ(softmax(Vector{0, 0}), (Vector{0.5, 0.5}));
  const auto p = softmax(Vector{1, 0});
  // e / (e + 1)
  EXPECT_NEAR(p[0], 0.7310585786300049, 1e-15);
  EXPECT_NEAR(p[1], 0.2689414213699951, 1e-15);
  const auto big = softmax(Vector{1000, 0});
  EXPECT_TRUE(all_finite(big));
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_THROW(softmax(Vector{std::nan(""), 0}), ValidationError);
}

TEST(Softmax, SumsToOne) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto p = softmax(random_vector(rng, 1 + rng() % 9, 10.0));
    double s = 0;
    for (double x : p) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, Cases) {
  EXPECT_NEAR(ce_loss(Vector{0, 0}, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(ce_loss(Vector{20, 0}, 0), 0.0, 1e-8);
  EXPECT_THROW(ce_loss(Vector{0, 0}, 2), ValidationError);
  EXPECT_THROW(ce_grad_logits(Vector{0, 0}, -1), ValidationError);
  EXPECT_EQ(ce_grad_logits(Vector{0, 0}, 0), (Vector{-0.5, 0.5}));
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vector l = random_vector(rng, 4);
    EXPECT_NEAR(ce_loss(l, 2), -std::log(softmax(l)[2]), 1e-12);
  }
}

TEST(CrossEntropy, BinaryGradientNormClosedForm) {
  // sigma_k = 0.8 <=> logit gap ln 4.
  const Vector l{std::log(4.0), 0.0};
  EXPECT_NEAR(softmax(l)[0], 0.8, 1e-15);
  EXPECT_NEAR(l2_norm(ce_grad_logits(l, 0)), 0.28284271247461906, 1e-15);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const Vector z = random_vector(rng, 2, 4.0);
    const int k = static_cast<int>(rng() % 2);
    EXPECT_NEAR(l2_norm(ce_grad_logits(z, k)), std::sqrt(2.0) * (1.0 - softmax(z)[static_cast<std::size_t>(k)]), 1e-12);
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const std::size_t c = 2 + rng() % 6;
    Vector l = random_vector(rng, c);
    const int k = static_cast<int>(rng() % c);
    const Vector g = ce_grad_logits(l, k);
    Vector fd(c);
    for (std::size_t j = 0; j < c; ++j) fd[j] = central_diff([&](const Vector& x) { return ce_loss(x, k); }, l, j, 1e-5);
    Vector diff(c);
    for (std::size_t j = 0; j < c; ++j) diff[j] = g[j] - fd[j];
    EXPECT_LT(l2_norm(diff) / std::max(l2_norm(g), 1e-12), 1e-6);
  }
}

TEST(TargetSatisfied, ThresholdAndArgmax) {
  EXPECT_TRUE(target_satisfied(Vector{0, 0}, 0));
  EXPECT_TRUE(target_satisfied(Vector{0, 0}, 1));
  EXPECT_FALSE(target_satisfied(Vector{0, 1e-9}, 0));
  EXPECT_TRUE(target_satisfied(Vector{0.1, 3.0, 1.0}, 1));
  EXPECT_FALSE(target_satisfied(Vector{0.1, 3.0, 1.0}, 2));
}

TEST(TemperatureScaling, PreservesArgmax) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> t(0.05, 20.0);
  for (int i = 0; i < 1000; ++i) {
    const Vector l = random_vector(rng, 2 + rng() % 6, 3.0);
    const Vector s = scaled(l, 1.0 / t(rng));
    EXPECT_EQ(argmax(softmax(l)), argmax(softmax(s)));
  }
}

TEST(MacroF1, Cases) {
  const std::vector<int> gold{0, 1, 0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(macro_f1(gold, gold, 2), 1.0);
  const std::vector<int> all_zero(6, 0);
  EXPECT_NEAR(macro_f1(all_zero, gold, 2), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(macro_f1(std::vector<int>{0}, gold, 2), DimensionError);
}

TEST(MacroF1, MatchesConfusionMatrixOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 5);
    std::vector<int> pred(200), gold(200);
    for (auto& x : pred) x = static_cast<int>(rng() % c);
    for (auto& x : gold) x = static_cast<int>(rng() % c);
    std::vector<std::vector<double>> cm(c, std::vector<double>(c, 0));
    for (std::size_t i = 0; i < pred.size(); ++i) cm[gold[i]][pred[i]] += 1;
    double f = 0;
    for (int k = 0; k < c; ++k) {
      double col = 0, row = 0;
      for (int j = 0; j < c; ++j) {
        col += cm[j][k];
        row += cm[k][j];
      }
      const double prec = col > 0 ? cm[k][k] / col : 0, rec = row > 0 ? cm[k][k] / row : 0;
      f += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0;
    }
    EXPECT_NEAR(macro_f1(pred, gold, c), f / c, 1e-12);
  }
}

TEST(TrainDisc, SeparableSetReachesHighF1) {
  std::mt19937_64 rng(8);
  std::vector<LabeledExample> train, test;
  for (int i = 0; i < 600; ++i) {
    Vector fv = random_vector(rng, 6, 1.0);
    const int y = fv[0] + 0.5 * fv[1] > 0 ? 1 : 0;
    (i < 400 ? train : test).push_back({fv, y});
  }
  auto d = train_disc(LinearDiscriminator::zeros("sep", 2, FeatureSpec{6, {1}, false}), train, {});
  EXPECT_GE(macro_f1(d, test), 0.9);
}

TEST(TrainDisc, RandomLabelsStayNearChance) {
  std::mt19937_64 rng(9);
  std::vector<LabeledExample> train, test;
  for (int i = 0; i < 1400; ++i) {
    Vector fv = random_vector(rng, 8, 1.0);
    (i < 1000 ? train : test).push_back({fv, static_cast<int>(rng() % 2)});
  }
  auto d = train_disc(LinearDiscriminator::zeros("noise", 2, FeatureSpec{8, {1}, false}), train, {});
  EXPECT_NEAR(macro_f1(d, test), 0.5, 0.1);
}

TEST(TrainDisc, LossNeverIncreasesAndIsDeterministic) {
  const auto corpus = generate_corpus(mstest::two_axis_spec(600));
  const FeatureSpec fs{64, {1}, true};
  const auto data = make_examples(corpus, "sentiment", fs);
  DiscTrainConfig cfg;
  cfg.learning_rate = 200.0;  // large enough to force halvings
  cfg.epochs = 15;
  std::vector<double> losses;
  const auto a = train_disc(LinearDiscriminator::zeros("sentiment", 2, fs), data, cfg, &losses);
  ASSERT_EQ(losses.size(), 16u);
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1] + 1e-6);
  const auto b = train_disc(LinearDiscriminator::zeros("sentiment", 2, fs), data, cfg);
  EXPECT_EQ(a.weights.data, b.weights.data);
  EXPECT_EQ(a.bias, b.bias);
}

TEST(TrainDisc, RejectsBadConfig) {
  const std::vector<LabeledExample> data{{Vector{1.0, 0.0}, 0}};
  auto d = LinearDiscriminator::zeros("x", 2, FeatureSpec{2, {1}, false});
  DiscTrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train_disc(d, data, cfg), ValidationError);
  EXPECT_THROW(train_disc(d, {}, {}), ValidationError);
  EXPECT_THROW(LinearDiscriminator::zeros("x", 1, FeatureSpec{}), ValidationError);
}

TEST(FitTemperature, CalibratedModelKeepsUnitTemperature) {
  std::mt19937_64 rng(10);
  auto d = LinearDiscriminator::zeros("cal", 3, FeatureSpec{5, {1}, false});
  d.weights.data = random_vector(rng, d.weights.data.size(), 1.0);
  const auto data = self_labeled(d, 6000, 11);
  const auto t = fit_temperature(d, data).temperature;
  EXPECT_NEAR(t, 1.0, 0.1);
  EXPECT_GT(t, 0.0);
}

TEST(FitTemperature, RecoversOverconfidenceFactor) {
  std::mt19937_64 rng(12);
  auto d = LinearDiscriminator::zeros("cal", 2, FeatureSpec{5, {1}, false});
  d.weights.data = random_vector(rng, d.weights.data.size(), 1.0);
  const auto data = self_labeled(d, 6000, 13);
  auto hot = d;
  for (double& w : hot.weights.data) w *= 5.0;
  const double t = fit_temperature(hot, data).temperature;
  EXPECT_GE(t, 4.5);
  EXPECT_LE(t, 5.5);
  EXPECT_LT(ece(hot, data, 10, t), ece(hot, data, 10, 1.0));
  EXPECT_LE(mean_nll(hot, data, t), mean_nll(hot, data, 1.0));
}

TEST(FitTemperature, NeverIncreasesNll) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto d = LinearDiscriminator::zeros("x", 3, FeatureSpec{4, {1}, false});
    d.weights.data = random_vector(rng, d.weights.data.size(), 3.0);
    std::vector<LabeledExample> data;
    for (int i = 0; i < 50; ++i) data.push_back({random_vector(rng, 4, 1.0), static_cast<int>(rng() % 3)});
    const double t = fit_temperature(d, data).temperature;
    EXPECT_GT(t, 0.0);
    EXPECT_LE(mean_nll(d, data, t), mean_nll(d, data, 1.0) + 1e-12);
  }
  EXPECT_THROW(fit_temperature(LinearDiscriminator::zeros("x", 2, FeatureSpec{2, {1}, false}), {}), ValidationError);
}

TEST(Ece, PerfectConfidentPredictor) {
  const auto d = identity_disc(2);
  std::vector<LabeledExample> data;
  for (int i = 0; i < 10; ++i) data.push_back({i % 2 ? Vector{0, 800} : Vector{800, 0}, i % 2});
  EXPECT_NEAR(ece(d, data, 10), 0.0, 1e-12);
}

TEST(Ece, CoinFlipAtHalfConfidence) {
  const auto d = identity_disc(2);
  std::vector<LabeledExample> data;
  for (int i = 0; i < 10; ++i) data.push_back({Vector{0, 0}, i % 2});
  EXPECT_NEAR(ece(d, data, 10), 0.0, 1e-12);
}

TEST(Ece, HandBinnedTenSamples) {
  // Three classes, logits [a, 0, 0]. Confidence 0.4 needs e^a = 4/3 and
  // confidence 0.8 needs e^a = 8. Two bins split at 0.5:
  //   low bin: 4 samples, 1 correct -> |0.25 - 0.4| = 0.15
  //   high bin: 6 samples, 3 correct -> |0.5 - 0.8| = 0.30
  //   ECE = 0.4 * 0.15 + 0.6 * 0.30 = 0.24
  const auto d = identity_disc(3);
  std::vector<LabeledExample> data;
  const Vector low{std::log(4.0 / 3.0), 0, 0}, high{std::log(8.0), 0, 0};
  for (int i = 0; i < 4; ++i) data.push_back({low, i == 0 ? 0 : 1});
  for (int i = 0; i < 6; ++i) data.push_back({high, i < 3 ? 0 : 2});
  EXPECT_NEAR(ece(d, data, 2), 0.24, 1e-12);
  EXPECT_THROW(ece(d, data, 0), ValidationError);
  EXPECT_THROW(ece(d, {}, 2), ValidationError);
}

TEST(Checkpoint, JsonRoundTrip) {
  std::mt19937_64 rng(15);
  auto d = LinearDiscriminator::zeros("formality", 2, FeatureSpec{8, {1, 2}, true});
  d.weights.data = random_vector(rng, d.weights.data.size());
  d.bias = random_vector(rng, 2);
  d.temperature = 0.37;
  const auto j = to_json(d);
  EXPECT_EQ(j.at("axis_name"), "formality");
  EXPECT_EQ(j.at("weights").size(), 2u * 72u);
  const auto back = discriminator_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.weights.data, d.weights.data);
  EXPECT_EQ(back.bias, d.bias);
  EXPECT_EQ(back.temperature, d.temperature);
  EXPECT_EQ(back.feature_spec, d.feature_spec);

  auto broken = j;
  broken["weights"].erase(0);
  EXPECT_THROW(discriminator_from_json(broken), Error);
}

}  // namespace
