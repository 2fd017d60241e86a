#include "moedis/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "moedis/errors.hpp"
#include "moedis/parallel.hpp"

namespace moedis {

namespace {

constexpr std::uint64_t kDataSeedMix = 0x9e3779b97f4a7c15ULL;
constexpr double kEmaDecay = 0.99;

}  // namespace

void TrainConfig::validate() const {
  mdn.validate();
  ppa.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
  if (dataset_size == 0) throw ConfigError("dataset_size must be at least 1");
  if (steps * batch_size > dataset_size) {
    throw ConfigError("steps * batch_size (" + std::to_string(steps * batch_size) + ") exceeds dataset_size (" +
                      std::to_string(dataset_size) + ")");
  }
  if (!use_ga && !use_ppa) throw ConfigError("at least one loss term must be enabled");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mdn", c.mdn},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"beta", c.ppa.beta},
       {"r_temp", c.ppa.r_temp},
       {"sigma_q", c.ppa.sigma_q},
       {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
       {"seed", c.seed},
       {"checkpoint_interval", c.checkpoint_interval},
       {"dataset_size", c.dataset_size},
       {"use_ga", c.use_ga},
       {"use_ppa", c.use_ppa}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"mdn",  "steps", "batch_size", "learning_rate",       "beta",         "r_temp",
                                "sigma_q", "adam", "seed",     "checkpoint_interval", "dataset_size", "use_ga",
                                "use_ppa", "n",    "K",        "d_h"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError("unknown training config field '" + key + "'");
    }
  }
  if (j.contains("mdn")) c.mdn = j.at("mdn").get<MdnConfig>();
  // Flat shorthands for the MDN sizes.
  c.mdn.n = j.value("n", c.mdn.n);
  c.mdn.latent_dim = j.value("K", c.mdn.latent_dim);
  c.mdn.hidden_dim = j.value("d_h", c.mdn.hidden_dim);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.ppa.beta = j.value("beta", c.ppa.beta);
  c.ppa.r_temp = j.value("r_temp", c.ppa.r_temp);
  c.ppa.sigma_q = j.value("sigma_q", c.ppa.sigma_q);
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  c.seed = j.value("seed", c.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.dataset_size = j.value("dataset_size", c.dataset_size);
  c.use_ga = j.value("use_ga", c.use_ga);
  c.use_ppa = j.value("use_ppa", c.use_ppa);
}

void to_json(nlohmann::json& j, const TrainRecord& r) {
  j = {{"step", r.step},
       {"L_GA", r.l_ga},
       {"L_PPA", r.l_ppa},
       {"L", r.l},
       {"C_diag_mean", r.c_diag_mean},
       {"C_offdiag_absmean", r.c_offdiag_absmean}};
}

TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.mdn = init_mdn(cfg.mdn, cfg.seed);
  for (const auto& [name, t] : trainable_params(s.mdn)) {
    s.adam_m.emplace(name, Tensor::zeros(t.shape()));
    s.adam_v.emplace(name, Tensor::zeros(t.shape()));
  }
  return s;
}

Checkpoint store_train_state(const TrainState& state, const TrainConfig& cfg) {
  Checkpoint ckpt;
  store_mdn(state.mdn, ckpt);
  for (const auto& [name, t] : state.adam_m) ckpt.put("adam.m." + name, t);
  for (const auto& [name, t] : state.adam_v) ckpt.put("adam.v." + name, t);
  ckpt.put("train.loss_ema", Tensor::scalar(state.loss_ema));
  ckpt.meta["train"] = {{"step", state.step}, {"config", cfg}};
  return ckpt;
}

TrainState load_train_state(const Checkpoint& ckpt, TrainConfig* cfg_out) {
  if (!ckpt.meta.contains("train")) throw FormatError("checkpoint carries no training state");
  TrainState s;
  s.mdn = load_mdn(ckpt);
  s.step = ckpt.meta.at("train").at("step").get<std::size_t>();
  for (const auto& [name, t] : trainable_params(s.mdn)) {
    s.adam_m.emplace(name, ckpt.get("adam.m." + name));
    s.adam_v.emplace(name, ckpt.get("adam.v." + name));
    if (s.adam_m.at(name).shape() != t.shape() || s.adam_v.at(name).shape() != t.shape()) {
      throw FormatError("optimizer moment shape mismatch for " + name);
    }
  }
  s.loss_ema = ckpt.get("train.loss_ema").item();
  if (cfg_out) *cfg_out = ckpt.meta.at("train").at("config").get<TrainConfig>();
  return s;
}

TrainRecord train_step(TrainState& state, const TrainConfig& cfg, const DifferentiableMap& g, const Tensor& b,
                       const Tensor& z_batch) {
  const auto batch = z_batch.rows();
  if (z_batch.cols() != cfg.mdn.latent_dim || g.latent_dim() != cfg.mdn.latent_dim) {
    throw DimensionError("train_step: latent width mismatch between batch, generator and MDN");
  }

  std::vector<Tensor> jac(batch);
  parallel_for(batch, [&](std::size_t i) { jac[i] = g.jacobian(z_batch.row_at(i)); });

  Tape tape;
  const ParamSet params = trainable_params(state.mdn);
  BoundParams bound(tape, params);
  std::vector<BatchNormStats> stats;
  auto traced = mdn_forward_batch(bound, state.mdn, tape.constant(z_batch), NormMode::kTrain, &stats);

  TrainRecord rec;
  rec.step = state.step + 1;
  std::vector<Var> per_sample;
  for (std::size_t i = 0; i < batch; ++i) {
    auto ga = ga_loss(traced.w[i], b, jac[i]);
    Var ppa = ppa_loss(traced.w[i], cfg.ppa);
    const auto cs = cross_stats(ga.parts.c.value());
    rec.l_ga += ga.loss.value().item();
    rec.l_ppa += ppa.value().item();
    rec.c_diag_mean += cs.diag_mean;
    rec.c_offdiag_absmean += cs.offdiag_absmean;
    if (cfg.use_ga && cfg.use_ppa) {
      per_sample.push_back(total_loss(ga.loss, ppa));
    } else {
      per_sample.push_back(cfg.use_ga ? ga.loss : ppa);
    }
  }
  Var loss = per_sample.front();
  for (std::size_t i = 1; i < batch; ++i) loss = add(loss, per_sample[i]);
  loss = scale(loss, 1.0 / double(batch));
  const double inv = 1.0 / double(batch);
  rec.l_ga *= inv;
  rec.l_ppa *= inv;
  rec.c_diag_mean *= inv;
  rec.c_offdiag_absmean *= inv;
  rec.l = loss.value().item();
  if (!std::isfinite(rec.l)) throw NumericError("non-finite training loss at step " + std::to_string(rec.step));

  tape.backward(loss);
  const ParamSet grads = bound.gradients();

  // Adam, parameters visited in name order.
  const double t = double(rec.step);
  const double c1 = 1.0 - std::pow(cfg.adam.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam.beta2, t);
  ParamSet next_params, next_m, next_v;
  for (const auto& [name, p] : params) {
    const auto& gr = grads.at(name);
    auto m = state.adam_m.at(name).vector();
    auto v = state.adam_v.at(name).vector();
    auto w = p.vector();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.adam.beta1 * m[i] + (1.0 - cfg.adam.beta1) * gr[i];
      v[i] = cfg.adam.beta2 * v[i] + (1.0 - cfg.adam.beta2) * gr[i] * gr[i];
      w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam.eps);
    }
    next_params.emplace(name, Tensor(p.shape(), std::move(w)));
    next_m.emplace(name, Tensor(p.shape(), std::move(m)));
    next_v.emplace(name, Tensor(p.shape(), std::move(v)));
  }

  assign_trainable(state.mdn, next_params);
  for (std::size_t i = 0; i < stats.size(); ++i) state.mdn.experts.experts[i].bn = std::move(stats[i]);
  state.adam_m = std::move(next_m);
  state.adam_v = std::move(next_v);
  state.loss_ema = state.step == 0 ? rec.l : kEmaDecay * state.loss_ema + (1.0 - kEmaDecay) * rec.l;
  state.step = rec.step;
  return rec;
}

void train_until_done(TrainState& state, const TrainConfig& cfg, const DifferentiableMap& g, const Tensor& b,
                      const TrainHooks& hooks) {
  cfg.validate();
  if (state.step > cfg.steps) throw ConfigError("state is already past the configured step count");
  const Tensor data = sample_latents(cfg.dataset_size, cfg.mdn.latent_dim, cfg.seed ^ kDataSeedMix);
  const auto bs = cfg.batch_size;
  while (state.step < cfg.steps) {
    const auto row_width = data.cols();
    const auto first = data.data().begin() + std::ptrdiff_t(state.step * bs * row_width);
    const Tensor z({bs, row_width}, std::vector<double>(first, first + std::ptrdiff_t(bs * row_width)));
    TrainRecord rec;
    try {
      rec = train_step(state, cfg, g, b, z);
    } catch (const std::exception&) {
      if (!hooks.failure_checkpoint.empty()) save_checkpoint(store_train_state(state, cfg), hooks.failure_checkpoint);
      throw;
    }
    if (hooks.on_record) hooks.on_record(rec);
    const bool last = state.step == cfg.steps;
    if (hooks.on_checkpoint && (last || (cfg.checkpoint_interval && state.step % cfg.checkpoint_interval == 0))) {
      hooks.on_checkpoint(state);
    }
  }
}

TrainState train(const TrainConfig& cfg, const DifferentiableMap& g, const Tensor& b, const TrainHooks& hooks) {
  TrainState state = init_train_state(cfg);
  train_until_done(state, cfg, g, b, hooks);
  return state;
}

}  // namespace moedis
