#include "moedis/experts.hpp"

#include <string>

#include "moedis/errors.hpp"

namespace moedis {

Var expert_forward(Var z, const ExpertWeights<Var>& w, BatchNormStats& stats, NormMode mode) {
  const auto k = z.cols();
  if (w.fc_weight.rows() != k || w.fc_weight.cols() != k || w.fc_bias.cols() != k) {
    throw DimensionError("expert_forward: FC layer must map K to K");
  }
  Var normed = mode == NormMode::kTrain ? batch_norm_train(z, w.gamma, w.beta, stats)
                                        : batch_norm_eval(z, w.gamma, w.beta, stats);
  Var features = relu(conv1d(normed, w.kernel));
  return add(matmul(features, transpose(w.fc_weight)), broadcast_rows(w.fc_bias, z.rows()));
}

Tensor expert_forward(const Tensor& z, std::size_t i, const ExpertParams& params) {
  if (i >= params.size()) {
    throw ArgumentError("expert index " + std::to_string(i) + " out of range for " +
                        std::to_string(params.size()) + " experts");
  }
  Tape tape;
  const auto& expert = params.experts[i];
  BatchNormStats stats = expert.bn;
  return expert_forward(tape.constant(z), bind_constants(tape, expert.weights), stats, NormMode::kEval).value();
}

SemanticVectorSet mdn_forward(const Tensor& z, const GateOutput& gate, const ExpertParams& params) {
  const auto n = params.size();
  if (gate.a.numel() != n) {
    throw DimensionError("mdn_forward: " + std::to_string(gate.a.numel()) + " gates for " + std::to_string(n) +
                         " experts");
  }
  const auto k = z.cols();
  std::vector<double> w;
  w.reserve(n * k);
  SemanticVectorSet out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = expert_forward(z, i, params);
    const double a = gate.a[i];
    for (double v : e.data()) w.push_back(a * v);
    out.gates.push_back(a);
  }
  out.w = Tensor({n, k}, std::move(w));
  return out;
}

void MdnConfig::validate() const {
  gating().validate();
  if (kernel_sizes.size() != n) {
    throw ConfigError("need one kernel size per expert (" + std::to_string(n) + "), got " +
                      std::to_string(kernel_sizes.size()));
  }
  for (auto k : kernel_sizes) {
    if (k % 2 == 0) throw ConfigError("expert kernel sizes must be odd, got " + std::to_string(k));
    if (k > latent_dim) throw ConfigError("expert kernel size " + std::to_string(k) + " exceeds latent size");
  }
}

void to_json(nlohmann::json& j, const MdnConfig& c) {
  j = {{"n", c.n}, {"latent_dim", c.latent_dim}, {"hidden_dim", c.hidden_dim}, {"kernel_sizes", c.kernel_sizes}};
}

void from_json(const nlohmann::json& j, MdnConfig& c) {
  c.n = j.value("n", c.n);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.kernel_sizes = j.value("kernel_sizes", c.kernel_sizes);
}

MdnParams init_mdn(const MdnConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  MdnParams p;
  p.config = cfg;
  p.gating = init_gating(cfg.gating(), rng);
  const auto k = cfg.latent_dim;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const auto ks = cfg.kernel_sizes[i];
    Expert e;
    e.weights.kernel = uniform_init({1, ks}, ks, rng);
    e.weights.gamma = Tensor::full({1, k}, 1.0);
    e.weights.beta = Tensor::zeros({1, k});
    e.weights.fc_weight = uniform_init({k, k}, k, rng);
    e.weights.fc_bias = uniform_init({1, k}, k, rng);
    e.bn = {Tensor::zeros({1, k}), Tensor::full({1, k}, 1.0)};
    p.experts.experts.push_back(std::move(e));
  }
  return p;
}

namespace {

std::string expert_prefix(std::size_t i) { return "experts." + std::to_string(i) + "."; }

}  // namespace

ParamSet trainable_params(const MdnParams& params) {
  ParamSet out;
  store_gating(params.gating, out);
  for (std::size_t i = 0; i < params.experts.size(); ++i) {
    const auto prefix = expert_prefix(i);
    params.experts.experts[i].weights.each(
        [&](const char* name, const Tensor& t) { out.insert_or_assign(prefix + name, t); });
  }
  return out;
}

void assign_trainable(MdnParams& params, const ParamSet& values) {
  params.gating = load_gating(values, params.config.n);
  for (std::size_t i = 0; i < params.experts.size(); ++i) {
    const auto prefix = expert_prefix(i);
    params.experts.experts[i].weights = ExpertWeights<Tensor>::load([&](const char* name) {
      auto it = values.find(prefix + name);
      if (it == values.end()) throw ArgumentError("missing parameter " + prefix + name);
      return it->second;
    });
  }
}

void store_mdn(const MdnParams& params, Checkpoint& ckpt) {
  for (auto& [name, t] : trainable_params(params)) ckpt.put(name, t);
  for (std::size_t i = 0; i < params.experts.size(); ++i) {
    const auto prefix = expert_prefix(i);
    ckpt.put(prefix + "bn.running_mean", params.experts.experts[i].bn.running_mean);
    ckpt.put(prefix + "bn.running_var", params.experts.experts[i].bn.running_var);
  }
  ckpt.meta["mdn"] = params.config;
}

MdnParams load_mdn(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("mdn")) throw FormatError("checkpoint carries no MDN config");
  MdnParams p;
  p.config = ckpt.meta.at("mdn").get<MdnConfig>();
  p.config.validate();
  p.experts.experts.resize(p.config.n);
  assign_trainable(p, ckpt.tensors);
  for (std::size_t i = 0; i < p.config.n; ++i) {
    const auto prefix = expert_prefix(i);
    p.experts.experts[i].bn = {ckpt.get(prefix + "bn.running_mean"), ckpt.get(prefix + "bn.running_var")};
  }
  return p;
}

TracedMdn mdn_forward_batch(const BoundParams& bound, const MdnParams& params, Var z_batch, NormMode mode,
                            std::vector<BatchNormStats>* stats_out) {
  const auto n = params.config.n;
  const auto k = params.config.latent_dim;
  const auto batch = z_batch.rows();
  if (z_batch.cols() != k) throw DimensionError("mdn_forward_batch: latent width does not match the MDN");

  Var h = gru_step(z_batch, GruWeights<Var>::load(bound.scoped("gating.gru.")));
  const auto attn = AttentionWeights<Var>::load(bound.scoped("gating.attn."));

  std::vector<Var> expert_out;
  std::vector<BatchNormStats> stats;
  for (std::size_t i = 0; i < n; ++i) {
    BatchNormStats s = params.experts.experts[i].bn;
    expert_out.push_back(
        expert_forward(z_batch, ExpertWeights<Var>::load(bound.scoped(expert_prefix(i))), s, mode));
    stats.push_back(std::move(s));
  }

  TracedMdn out;
  for (std::size_t b = 0; b < batch; ++b) {
    Var a = attention_gates(slice_rows(h, b, 1), attn, n).a;
    std::vector<Var> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) rows.push_back(slice_rows(expert_out[i], b, 1));
    out.w.push_back(mul(broadcast_cols(a, k), concat_rows(rows)));
    out.gates.push_back(a);
  }
  if (stats_out) *stats_out = std::move(stats);
  return out;
}

SemanticVectorSet semantic_vectors(const MdnParams& params, const Tensor& z) {
  if (z.rows() != 1) throw DimensionError("semantic_vectors: expects a single 1 x K latent");
  Tape tape;
  BoundParams bound(tape, trainable_params(params), false);
  auto traced = mdn_forward_batch(bound, params, tape.constant(z), NormMode::kEval, nullptr);
  SemanticVectorSet out;
  out.w = traced.w.front().value();
  out.gates = traced.gates.front().value().vector();
  return out;
}

}  // namespace moedis
