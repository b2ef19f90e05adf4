#include <gtest/gtest.h>

#include <algorithm>

#include "multistyle/features.hpp"
#include "test_util.hpp"

namespace {

using namespace multistyle;

TEST(Features, HandCountNormalized) {
  FeatureSpec spec{4, {1}, true};
  const TokenSeq seq{0, 0, 1};
  const auto fv = extract(seq, spec);
  ASSERT_EQ(fv.size(), 4u);
  EXPECT_DOUBLE_EQ(fv[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(fv[1], 1.0 / 3.0);
  EXPECT_EQ(fv[2], 0.0);
  EXPECT_EQ(fv[3], 0.0);
}

TEST(Features, EmptySequenceIsZero) {
  FeatureSpec spec{4, {1, 2}, true};
  const auto fv = extract(TokenSeq{}, spec);
  EXPECT_EQ(fv.size(), 20u);
  EXPECT_TRUE(std::all_of(fv.begin(), fv.end(), [](double x) { return x == 0.0; }));
}

TEST(Features, RawCountsWithoutNormalization) {
  FeatureSpec spec{3, {1, 2}, false};
  const auto fv = extract(TokenSeq{2, 2, 0}, spec);
  EXPECT_EQ(fv[2], 2.0);
  EXPECT_EQ(fv[0], 1.0);
  EXPECT_EQ(fv[3 + 2 * 3 + 2], 1.0);  // bigram (2,2)
  EXPECT_EQ(fv[3 + 2 * 3 + 0], 1.0);  // bigram (2,0)
}

TEST(Features, LengthContract) {
  EXPECT_EQ((FeatureSpec{64, {1}, true}.feature_length()), 64u);
  EXPECT_EQ((FeatureSpec{10, {1, 2}, true}.feature_length()), 110u);
  EXPECT_EQ((FeatureSpec{5, {3}, true}.feature_length()), 125u);
}

TEST(Features, UnitL1ForNonemptyAndDeterministic) {
  std::mt19937_64 rng(5);
  FeatureSpec spec{16, {1, 2}, true};
  for (int trial = 0; trial < 50; ++trial) {
    TokenSeq seq(1 + rng() % 30);
    for (auto& t : seq) t = static_cast<Token>(rng() % 16);
    const auto a = extract(seq, spec);
    EXPECT_NEAR(l1_norm(a), 1.0, 1e-12);
    EXPECT_EQ(a, extract(seq, spec));
  }
}

TEST(Features, OrderOneIsPermutationInvariantOrderTwoIsNot) {
  const TokenSeq seq{1, 2, 3, 1, 0};
  const TokenSeq perm{3, 1, 1, 0, 2};
  EXPECT_EQ(extract(seq, {4, {1}, true}), extract(perm, {4, {1}, true}));
  EXPECT_NE(extract(seq, {4, {2}, true}), extract(perm, {4, {2}, true}));
}

TEST(Features, OutOfVocabularyRejected) {
  EXPECT_THROW(extract(TokenSeq{0, 4}, {4, {1}, true}), ValidationError);
  EXPECT_THROW(extract(TokenSeq{-1}, {4, {1}, true}), ValidationError);
  EXPECT_THROW(extract(TokenSeq{0}, {4, {0}, true}), ValidationError);
}

TEST(Features, JsonRoundTrip) {
  FeatureSpec spec{12, {1, 2}, false};
  EXPECT_EQ(feature_spec_from_json(to_json(spec)), spec);
}

}  // namespace
