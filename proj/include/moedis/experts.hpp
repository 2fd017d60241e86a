#pragma once

// Expert network and the full mixture-of-experts disentangling network (MDN).
//
// Expert i maps a latent z (1 x K) to E_i(z) = FC(ReLU(Conv(BN(z), kernel_i))),
// another 1 x K row. The MDN scales each expert output by its gate a_i and
// stacks the rows into the semantic vector matrix W (n x K).

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "json.hpp"
#include "moedis/autodiff.hpp"
#include "moedis/checkpoint.hpp"
#include "moedis/gating.hpp"
#include "moedis/params.hpp"

namespace moedis {

// kernel: 1 x k (k odd).  gamma, beta: 1 x K.  fc_weight: K x K.  fc_bias: 1 x K.
template <class T>
struct ExpertWeights {
  T kernel, gamma, beta, fc_weight, fc_bias;

  template <class Fn>
  void each(Fn&& fn) const {
    fn("kernel", kernel), fn("bn.gamma", gamma), fn("bn.beta", beta), fn("fc.weight", fc_weight);
    fn("fc.bias", fc_bias);
  }
  template <class Get>
  static ExpertWeights load(Get&& get) {
    return {get("kernel"), get("bn.gamma"), get("bn.beta"), get("fc.weight"), get("fc.bias")};
  }
};

struct Expert {
  ExpertWeights<Tensor> weights;
  BatchNormStats bn;
};

struct ExpertParams {
  std::vector<Expert> experts;
  std::size_t size() const { return experts.size(); }
};

enum class NormMode { kTrain, kEval };

struct SemanticVectorSet {
  Tensor w;                   // n x K, row i from expert i
  std::vector<double> gates;  // a_i used to scale row i
};

// Traced expert forward over a batch z (B x K). In train mode `stats` receives
// the updated running statistics.
Var expert_forward(Var z, const ExpertWeights<Var>& w, BatchNormStats& stats, NormMode mode);

// Eval-mode expert output for a single latent. ArgumentError if i >= n.
Tensor expert_forward(const Tensor& z, std::size_t i, const ExpertParams& params);

// w_i = a_i * E_i(z), eval-mode experts.
SemanticVectorSet mdn_forward(const Tensor& z, const GateOutput& gate, const ExpertParams& params);

struct MdnConfig {
  std::size_t n = 4;
  std::size_t latent_dim = 16;
  std::size_t hidden_dim = 64;
  std::vector<std::size_t> kernel_sizes{3, 5, 7, 9};

  void validate() const;
  GatingConfig gating() const { return {latent_dim, hidden_dim, n}; }
};

void to_json(nlohmann::json& j, const MdnConfig& c);
void from_json(const nlohmann::json& j, MdnConfig& c);

struct MdnParams {
  MdnConfig config;
  GatingParams gating;
  ExpertParams experts;
};

MdnParams init_mdn(const MdnConfig& cfg, std::uint64_t seed);

// Names: gating.gru.*, gating.attn.*, experts.{i}.kernel, experts.{i}.bn.{gamma,beta},
// experts.{i}.fc.{weight,bias}. Running BN statistics are state, not parameters.
ParamSet trainable_params(const MdnParams& params);
void assign_trainable(MdnParams& params, const ParamSet& values);

// Adds the trainable tensors plus experts.{i}.bn.running_{mean,var} and the
// config under meta["mdn"].
void store_mdn(const MdnParams& params, Checkpoint& ckpt);
MdnParams load_mdn(const Checkpoint& ckpt);

// Traced MDN over a batch of latents (B x K). Returns one n x K semantic
// matrix per batch row. Gating runs row by row; experts see the whole batch
// so train-mode batch norm normalizes across it. `stats_out` (train mode)
// receives each expert's updated running statistics.
struct TracedMdn {
  std::vector<Var> w;
  std::vector<Var> gates;  // n x 1 per row
};
TracedMdn mdn_forward_batch(const BoundParams& bound, const MdnParams& params, Var z_batch, NormMode mode,
                            std::vector<BatchNormStats>* stats_out);

// Eval-mode W(z) for one latent.
SemanticVectorSet semantic_vectors(const MdnParams& params, const Tensor& z);

}  // namespace moedis
