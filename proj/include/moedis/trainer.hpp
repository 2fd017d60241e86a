#pragma once

// Adam training of the MDN on L_GA + L_PPA over a fixed latent dataset.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moedis/checkpoint.hpp"
#include "moedis/experts.hpp"
#include "moedis/generator.hpp"
#include "moedis/losses.hpp"

namespace moedis {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  MdnConfig mdn;
  std::size_t steps = 10000;
  std::size_t batch_size = 2;
  double learning_rate = 5e-6;
  PpaConfig ppa;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // 0: only the final state
  std::size_t dataset_size = 20000;
  bool use_ga = true;   // ablation switches
  bool use_ppa = true;

  void validate() const;  // ConfigError, including steps * batch_size > dataset_size
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);  // missing fields keep defaults

struct TrainRecord {
  std::size_t step = 0;
  double l_ga = 0.0;
  double l_ppa = 0.0;
  double l = 0.0;
  double c_diag_mean = 0.0;
  double c_offdiag_absmean = 0.0;
};
void to_json(nlohmann::json& j, const TrainRecord& r);

struct TrainState {
  std::size_t step = 0;  // completed updates
  MdnParams mdn;
  ParamSet adam_m, adam_v;
  double loss_ema = 0.0;  // exponential moving average of L, decay 0.99
};

TrainState init_train_state(const TrainConfig& cfg);

// Full training state plus the config under meta["train"].
Checkpoint store_train_state(const TrainState& state, const TrainConfig& cfg);
TrainState load_train_state(const Checkpoint& ckpt, TrainConfig* cfg_out = nullptr);

struct TrainHooks {
  std::function<void(const TrainRecord&)> on_record;
  // Called every cfg.checkpoint_interval steps and after the last step.
  std::function<void(const TrainState&)> on_checkpoint;
  // If set, the last good state is written here before a failing step rethrows.
  std::string failure_checkpoint;
};

// One update on the given batch (B x K). The state is left untouched when the
// step throws.
TrainRecord train_step(TrainState& state, const TrainConfig& cfg, const DifferentiableMap& g, const Tensor& b,
                       const Tensor& z_batch);

// Runs updates until state.step == cfg.steps. Latents come from a fixed
// dataset sample_latents(cfg.dataset_size, K, seed derived from cfg.seed), batch t taking rows
// [t * batch_size, (t + 1) * batch_size).
void train_until_done(TrainState& state, const TrainConfig& cfg, const DifferentiableMap& g, const Tensor& b,
                      const TrainHooks& hooks = {});

TrainState train(const TrainConfig& cfg, const DifferentiableMap& g, const Tensor& b, const TrainHooks& hooks = {});

}  // namespace moedis
