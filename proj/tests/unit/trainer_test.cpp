#include <algorithm>
#include <atomic>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "moedis/errors.hpp"
#include "moedis/sbv.hpp"
#include "moedis/trainer.hpp"

namespace moedis {
namespace {

const GeneratorModel& generator() {
  static const GeneratorModel g{GeneratorConfig{}};
  return g;
}

const Tensor& boundaries() {
  static const Tensor b = fit_boundaries(label_latents(generator(), sample_latents(2000, 16, 7))).b;
  return b;
}

TrainConfig quick_config(std::size_t steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.learning_rate = 1e-3;
  cfg.seed = 5;
  return cfg;
}

std::string bytes(const TrainState& s, const TrainConfig& cfg) {
  return encode_checkpoint(store_train_state(s, cfg));
}

// Counts calls and can be told to return a zero Jacobian from a given call on.
class ProbeMap : public DifferentiableMap {
 public:
  explicit ProbeMap(const GeneratorModel& g, std::size_t break_after = SIZE_MAX) : g_(g), break_after_(break_after) {}
  std::size_t latent_dim() const override { return g_.latent_dim(); }
  std::size_t feature_dim() const override { return g_.feature_dim(); }
  Tensor generate(const Tensor& z) const override {
    ++generate_calls;
    return g_.generate(z);
  }
  Tensor jacobian(const Tensor& z) const override {
    if (jacobian_calls++ >= break_after_) return Tensor::zeros({feature_dim(), latent_dim()});
    return g_.jacobian(z);
  }
  mutable std::atomic<std::size_t> generate_calls{0}, jacobian_calls{0};

 private:
  const GeneratorModel& g_;
  std::size_t break_after_;
};

TEST(SampleLatents, StandardNormalMoments) {
  const auto z = sample_latents(20000, 16, 3);
  for (std::size_t c = 0; c < 16; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < 20000; ++r) mean += z.at(r, c);
    mean /= 20000.0;
    for (std::size_t r = 0; r < 20000; ++r) sq += (z.at(r, c) - mean) * (z.at(r, c) - mean);
    EXPECT_NEAR(mean, 0.0, 0.03);
    EXPECT_NEAR(sq / 19999.0, 1.0, 0.05);
  }
  EXPECT_EQ(sample_latents(100, 16, 3), sample_latents(100, 16, 3));
  EXPECT_NE(sample_latents(100, 16, 3), sample_latents(100, 16, 4));
}

TEST(Train, ZeroStepsKeepsInitialization) {
  const auto cfg = quick_config(0);
  const auto state = train(cfg, generator(), boundaries());
  EXPECT_EQ(state.step, 0u);
  EXPECT_EQ(trainable_params(state.mdn), trainable_params(init_mdn(cfg.mdn, cfg.seed)));
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto cfg = quick_config(30);
  EXPECT_EQ(bytes(train(cfg, generator(), boundaries()), cfg), bytes(train(cfg, generator(), boundaries()), cfg));
  auto other = cfg;
  other.seed = 6;
  EXPECT_NE(bytes(train(other, generator(), boundaries()), cfg), bytes(train(cfg, generator(), boundaries()), cfg));
}

TEST(Train, ResumeIsBitExact) {
  const auto cfg = quick_config(40);
  const auto straight = train(cfg, generator(), boundaries());

  auto half = cfg;
  half.steps = 20;
  const auto first = train(half, generator(), boundaries());
  TrainConfig restored_cfg;
  auto resumed = load_train_state(decode_checkpoint(encode_checkpoint(store_train_state(first, half))), &restored_cfg);
  EXPECT_EQ(restored_cfg.steps, 20u);
  train_until_done(resumed, cfg, generator(), boundaries());
  EXPECT_EQ(bytes(resumed, cfg), bytes(straight, cfg));
}

TEST(Train, LossDecreasesOnLinearGenerator) {
  const auto cfg = quick_config(1000);
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.on_record = [&](const TrainRecord& r) { losses.push_back(r.l); };
  train(cfg, generator(), boundaries(), hooks);
  ASSERT_EQ(losses.size(), 1000u);
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  const double early = median({losses.begin(), losses.begin() + 100});
  const double late = median({losses.end() - 100, losses.end()});
  EXPECT_LE(late, early);
  EXPECT_LT(late, 0.5 * early);
}

TEST(Train, NeverConsultsLabels) {
  const Tensor& b = boundaries();  // fitting the SBVs reads labels; keep it outside the window
  const auto before = attribute_oracle_calls();
  ProbeMap probe(generator());
  train(quick_config(25), probe, b);
  EXPECT_EQ(attribute_oracle_calls(), before);
  EXPECT_EQ(probe.generate_calls.load(), 0u);
  EXPECT_EQ(probe.jacobian_calls.load(), 50u);
}

TEST(Train, CollapseAbortsWithLastGoodCheckpoint) {
  const auto cfg = quick_config(20);
  const auto path = std::filesystem::temp_directory_path() / "moedis_trainer_failure.ckpt";
  std::filesystem::remove(path);
  ProbeMap probe(generator(), 20);  // batches of 2: step 11 sees a zero Jacobian
  TrainHooks hooks;
  hooks.failure_checkpoint = path.string();
  TrainState state = init_train_state(cfg);
  EXPECT_THROW(train_until_done(state, cfg, probe, boundaries(), hooks), DirectionCollapseError);
  EXPECT_EQ(state.step, 10u);
  const auto saved = load_train_state(load_checkpoint(path));
  EXPECT_EQ(saved.step, 10u);
  EXPECT_EQ(bytes(saved, cfg), bytes(state, cfg));
  auto reference = cfg;
  reference.steps = 10;
  EXPECT_EQ(bytes(train(reference, generator(), boundaries()), cfg), bytes(state, cfg));
  std::filesystem::remove(path);
}

TEST(Train, CheckpointHookCadence) {
  auto cfg = quick_config(25);
  cfg.checkpoint_interval = 10;
  std::vector<std::size_t> seen;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const TrainState& s) { seen.push_back(s.step); };
  train(cfg, generator(), boundaries(), hooks);
  EXPECT_EQ(seen, (std::vector<std::size_t>{10, 20, 25}));
}

TEST(TrainConfig, Validation) {
  auto cfg = quick_config(10001);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = quick_config(10);
  cfg.use_ga = cfg.use_ppa = false;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = quick_config(10);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW((nlohmann::json{{"stepz", 3}}.get<TrainConfig>()), ConfigError);
}

TEST(TrainConfig, JsonRoundTrip) {
  auto cfg = quick_config(123);
  cfg.ppa.r_temp = 0.3;
  cfg.use_ppa = false;
  cfg.mdn.kernel_sizes = {1, 3, 5, 7};
  const auto back = nlohmann::json(cfg).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(cfg));
  const auto flat = nlohmann::json{{"n", 2}, {"K", 8}, {"d_h", 8}}.get<TrainConfig>();
  EXPECT_EQ(flat.mdn.n, 2u);
  EXPECT_EQ(flat.mdn.latent_dim, 8u);
  EXPECT_EQ(flat.learning_rate, 5e-6);
}

}  // namespace
}  // namespace moedis
