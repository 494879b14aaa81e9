#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <map>
#include <set>

#include "mpt/rng.hpp"

using namespace mpt;

namespace {

// Pearson χ² critical value at p = 0.001 for small degrees of freedom.
double chi2_crit_001(int dof) {
  static const std::map<int, double> table{{1, 10.83}, {2, 13.82}, {4, 18.47}, {5, 20.52}, {9, 27.88}};
  return table.at(dof);
}

}  // namespace

TEST(SplitMix64, PublishedSequenceFromZero) {
  SplitMix64 sm(0);
  EXPECT_EQ(sm.next(), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(sm.next(), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(sm.next(), 0x06c45d188009454fULL);
}

TEST(Xoshiro256pp, GoldenOutputsForSeedZero) {
  Xoshiro256pp rng(0);
  EXPECT_EQ(rng(), 0x53175d61490b23dfULL);
  EXPECT_EQ(rng(), 0x61da6f3dc380d507ULL);
  EXPECT_EQ(rng(), 0x5c0fdf91ec9a7bfcULL);
}

TEST(Streams, SameKeySameSequenceDistinctKeysDiffer) {
  auto a = make_stream(7, Stream::kTrajectory, 3), b = make_stream(7, Stream::kTrajectory, 3);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a(), b());
  std::set<std::uint64_t> keys;
  for (std::uint64_t root : {0ull, 1ull, 7ull})
    for (auto p : {Stream::kTrajectory, Stream::kFrame, Stream::kInit, Stream::kBayes})
      for (std::uint64_t i = 0; i < 50; ++i) keys.insert(stream_key(root, p, i));
  EXPECT_EQ(keys.size(), 3u * 4u * 50u);
}

TEST(Uniform, RangeAndMean) {
  Xoshiro256pp rng(1);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double v = rng.uniform_open0();
    ASSERT_GT(v, 0.0);
    ASSERT_LE(v, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST(Below, UniformOverSmallRange) {
  Xoshiro256pp rng(2);
  const int k = 10, n = 100000;
  std::array<int, 10> counts{};
  for (int i = 0; i < n; ++i) {
    const auto v = rng.below(k);
    ASSERT_LT(v, 10u);
    ++counts[v];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
  EXPECT_LT(chi2, chi2_crit_001(9));
  EXPECT_EQ(rng.below(1), 0u);
}

TEST(Normal, FirstTwoMoments) {
  Xoshiro256pp rng(3);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(TruncatedNormal, StaysWithinTwoSigmaWithTruncatedSpread) {
  Xoshiro256pp rng(4);
  const int n = 200000;
  const double sd = 0.02;
  double s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.truncated_normal(sd);
    ASSERT_LE(std::abs(z), 2.0 * sd);
    s2 += z * z;
  }
  // Var of N(0,1) truncated to [−2, 2] is 1 − 4φ(2)/(2Φ(2) − 1).
  const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * M_PI);
  const double mass = std::erf(2.0 / std::sqrt(2.0));
  const double expected = sd * sd * (1.0 - 4.0 * phi2 / mass);
  EXPECT_NEAR(s2 / n, expected, 0.01 * expected);
}

class GammaMoments : public ::testing::TestWithParam<double> {};

TEST_P(GammaMoments, MeanAndVarianceEqualShape) {
  const double shape = GetParam();
  Xoshiro256pp rng(5);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = rng.gamma(shape);
    ASSERT_GE(g, 0.0);
    s += g;
    s2 += g * g;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, shape, 5.0 * std::sqrt(shape / n));
  EXPECT_NEAR(var, shape, 0.05 * shape + 5.0 * std::sqrt(shape / n));
}

INSTANTIATE_TEST_SUITE_P(Shapes, GammaMoments, ::testing::Values(0.05, 0.5, 1.0, 3.7));

TEST(Categorical, FrequenciesFollowWeights) {
  Xoshiro256pp rng(6);
  const std::vector<double> w{0.1, 0.0, 0.6, 0.3};
  std::array<int, 4> counts{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[rng.categorical(w)];
  EXPECT_EQ(counts[1], 0);
  double chi2 = 0.0;
  for (int j : {0, 2, 3}) chi2 += (counts[j] - n * w[j]) * (counts[j] - n * w[j]) / (n * w[j]);
  EXPECT_LT(chi2, chi2_crit_001(2));
}

TEST(Shuffle, UniformOverPermutationsOfThree) {
  Xoshiro256pp rng(7);
  std::map<std::array<int, 3>, int> seen;
  const int n = 60000;
  for (int i = 0; i < n; ++i) {
    std::array<int, 3> a{1, 2, 3};
    rng.shuffle(a.begin(), a.end());
    ++seen[a];
  }
  ASSERT_EQ(seen.size(), 6u);
  double chi2 = 0.0;
  for (const auto& [perm, c] : seen) chi2 += (c - n / 6.0) * (c - n / 6.0) / (n / 6.0);
  EXPECT_LT(chi2, chi2_crit_001(5));
}
