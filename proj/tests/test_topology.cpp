#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "psgd/topology.hpp"

using namespace psgd;

TEST(RingMatrix, SevenLearnerRow) {
  const auto t = ring_matrix(7);
  const double third = 1.0 / 3.0;
  const double expect[7] = {third, third, 0, 0, 0, 0, third};
  for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(t(0, j), expect[j]) << j;
}

TEST(RingMatrix, TooSmall) {
  EXPECT_THROW(ring_matrix(2), TopologyError);
  EXPECT_THROW(ring_matrix(1), TopologyError);
  try {
    ring_matrix(2);
  } catch (const TopologyError& e) {
    EXPECT_NE(std::string(e.what()).find("L >= 3"), std::string::npos);
  }
}

TEST(RingMatrix, DoublyStochasticAndSymmetric) {
  for (std::size_t L = 3; L <= 64; ++L) {
    const auto t = ring_matrix(L);
    const auto rep = validate_doubly_stochastic(t);
    EXPECT_TRUE(rep.passed()) << L << ": " << rep.describe();
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) EXPECT_EQ(t(i, j), t(j, i));
  }
}

TEST(UniformMatrix, DoublyStochastic) {
  for (std::size_t L = 1; L <= 32; ++L) EXPECT_TRUE(validate_doubly_stochastic(uniform_matrix(L)).passed());
}

TEST(Validate, NamesWorstColumn) {
  auto rows = ring_matrix(4).rows();
  rows[0][2] = 0.2;  // row 0 and column 2 now sum to 1.2
  const auto rep = validate_doubly_stochastic(MixingMatrix(rows));
  EXPECT_FALSE(rep.passed());
  EXPECT_EQ(rep.worst_column, 2u);
  EXPECT_NEAR(rep.max_column_deviation, 0.2, 1e-15);
  EXPECT_NE(rep.describe().find("column 2"), std::string::npos);
}

TEST(Validate, NegativeEntries) {
  const MixingMatrix m({{1.5, -0.5}, {-0.5, 1.5}});
  const auto rep = validate_doubly_stochastic(m);
  EXPECT_EQ(rep.max_row_deviation, 0.0);
  EXPECT_EQ(rep.entries_out_of_range, 4u);
  EXPECT_FALSE(rep.passed());
}

TEST(MixingMatrix, RejectsNonSquare) {
  EXPECT_ANY_THROW(MixingMatrix({{1.0, 0.0}, {1.0}}));
}

TEST(ApplyMixing, RingOfFour) {
  const std::vector<ParamVector> models{ParamVector{1.0}, ParamVector{2.0}, ParamVector{3.0}, ParamVector{4.0}};
  const auto out = apply_mixing(models, ring_matrix(4));
  EXPECT_NEAR(out[0][0], 7.0 / 3.0, 1e-15);  // (4 + 1 + 2) / 3
  EXPECT_NEAR(out[1][0], 2.0, 1e-15);
  EXPECT_NEAR(out[3][0], 8.0 / 3.0, 1e-15);
}

TEST(ApplyMixing, PreservesMean) {
  std::vector<ParamVector> models;
  for (int i = 0; i < 9; ++i) models.push_back(ParamVector{double(i * i), -double(i)});
  const auto out = apply_mixing(models, ring_matrix(9));
  EXPECT_LT(l2_distance(mean_of(out), mean_of(models)), 1e-12);
}

TEST(ApplyMixing, SizeMismatch) {
  const std::vector<ParamVector> models{ParamVector{1.0}, ParamVector{2.0}};
  EXPECT_THROW(apply_mixing(models, ring_matrix(3)), DimensionError);
}

// Oracle: lambda_2 of the 16-ring is 0.949253021674191 and 133 is the first power
// where lambda_2^n < 1e-3.
TEST(RingLambda2, SixteenLearners) {
  EXPECT_NEAR(ring_lambda2(16), 0.949253021674191, 1e-13);
  EXPECT_LT(std::pow(ring_lambda2(16), 133), 1e-3);
  EXPECT_GT(std::pow(ring_lambda2(16), 132), 1e-3);
}

// Repeated mixing drives every model to the initial mean at rate lambda_2^n.
TEST(ApplyMixing, ConsensusContraction) {
  const std::size_t L = 16;
  std::vector<ParamVector> models;
  for (std::size_t i = 0; i < L; ++i) models.push_back(ParamVector{std::sin(double(i)), double(i % 5)});
  const ParamVector mean = mean_of(models);
  double start = 0.0;
  for (const auto& w : models) start = std::max(start, l2_distance(w, mean));
  const auto t = ring_matrix(L);
  for (int n = 0; n < 133; ++n) models = apply_mixing(models, t);
  for (const auto& w : models) EXPECT_LT(l2_distance(w, mean), 1e-3 * start * std::sqrt(double(L)));
  EXPECT_LT(consensus_distance(models), 1e-3 * start * std::sqrt(double(L)));
}
