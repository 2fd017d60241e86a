#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "moedis/errors.hpp"
#include "moedis/sbv.hpp"

namespace moedis {
namespace {

double dot_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(j, k);
  return s;
}

const GeneratorModel& linear_generator() {
  static const GeneratorModel g{GeneratorConfig{}};
  return g;
}

const LabeledDataset& linear_data() {
  static const LabeledDataset d = label_latents(linear_generator(), sample_latents(2000, 16, 21));
  return d;
}

TEST(FitBoundaries, RecoversGroundTruthDirections) {
  const auto set = fit_boundaries(linear_data());
  const auto& t = linear_generator().directions();
  ASSERT_EQ(set.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(dot_rows(set.b, i, set.b, i), 1.0, 1e-10);
    EXPECT_GE(std::abs(dot_rows(set.b, i, t, i)), 0.95);
    for (std::size_t j = 0; j < 4; ++j)
      if (j != i) EXPECT_LE(std::abs(dot_rows(set.b, i, t, j)), 0.15);
    EXPECT_GE(set.diagnostics[i].holdout_accuracy, 0.9);
  }
}

TEST(FitBoundaries, SymmetricToyProblem) {
  LabeledDataset toy{Tensor::column({-1.0, 1.0}), {{-1}, {1}}};
  FitConfig cfg;
  cfg.min_samples = 2;
  cfg.holdout_frac = 0.0;
  const auto set = fit_boundaries(toy, cfg);
  EXPECT_NEAR(set.b[0], 1.0, 1e-12);
  EXPECT_NEAR(set.intercepts[0], 0.0, 1e-9);
  EXPECT_TRUE(set.diagnostics[0].converged);
}

TEST(FitBoundaries, FlippingLabelsFlipsOnlyThatRow) {
  auto flipped = linear_data();
  for (auto& row : flipped.labels) row[1] = -row[1];
  const auto a = fit_boundaries(linear_data());
  const auto b = fit_boundaries(flipped);
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_NEAR(b.b.at(1, k), -a.b.at(1, k), 1e-6);
    EXPECT_EQ(b.b.at(0, k), a.b.at(0, k));
    EXPECT_EQ(b.b.at(3, k), a.b.at(3, k));
  }
}

TEST(FitBoundaries, Deterministic) {
  EXPECT_EQ(fit_boundaries(linear_data()).b, fit_boundaries(linear_data()).b);
}

TEST(FitBoundaries, DegenerateInputs) {
  auto one_class = linear_data();
  for (auto& row : one_class.labels) row[2] = 1;
  EXPECT_THROW(fit_boundaries(one_class), DegenerateDataError);

  LabeledDataset small{sample_latents(50, 16, 1), std::vector<std::vector<int>>(50, {1})};
  EXPECT_THROW(fit_boundaries(small), DegenerateDataError);
}

TEST(FitBoundaries, RandomLabelsFailAccuracyFloor) {
  auto noisy = linear_data();
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.5);
  for (auto& row : noisy.labels) row[0] = coin(rng) ? 1 : -1;
  EXPECT_THROW(fit_boundaries(noisy), FitError);
}

TEST(BoundarySet, CheckpointRoundTrip) {
  const auto set = fit_boundaries(linear_data());
  Checkpoint c;
  set.store(c);
  const auto back = BoundarySet::load(decode_checkpoint(encode_checkpoint(c)));
  EXPECT_EQ(back.b, set.b);
  EXPECT_EQ(back.intercepts, set.intercepts);
  EXPECT_EQ(back.diagnostics.size(), 4u);
}

}  // namespace
}  // namespace moedis
