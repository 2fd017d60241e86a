#pragma once

// Gating network: one GRU step from a zero initial state, then scaled
// dot-product attention over n expert-aligned tokens cut from the hidden
// state. Each token's attention output is projected to a scalar and squashed
// by a sigmoid, giving one gate a_i in (0, 1) per expert.

#include <cstddef>
#include <optional>
#include <random>

#include "moedis/autodiff.hpp"
#include "moedis/params.hpp"

namespace moedis {

// w_r, w_u: d_h x K (act on z).  u_r, u_u, u_h, w_h: d_h x d_h.  Biases 1 x d_h.
// The candidate state reads the update gate, tanh(W_h u + U_h (r*h0) + b_h),
// so W_h is square.
template <class T>
struct GruWeights {
  T w_r, u_r, w_u, u_u, w_h, u_h, b_r, b_u, b_h;

  template <class Fn>
  void each(Fn&& fn) const {
    fn("w_r", w_r), fn("u_r", u_r), fn("w_u", w_u), fn("u_u", u_u), fn("w_h", w_h);
    fn("u_h", u_h), fn("b_r", b_r), fn("b_u", b_u), fn("b_h", b_h);
  }
  template <class Get>
  static GruWeights load(Get&& get) {
    return {get("w_r"), get("u_r"), get("w_u"), get("u_u"), get("w_h"),
            get("u_h"), get("b_r"), get("b_u"), get("b_h")};
  }
};

// w_q, w_k, w_v: d_k x d_t.  b_q, b_k, b_v: 1 x d_k.  p_g: 1 x d_k.
template <class T>
struct AttentionWeights {
  T w_q, w_k, w_v, b_q, b_k, b_v, p_g;

  template <class Fn>
  void each(Fn&& fn) const {
    fn("w_q", w_q), fn("w_k", w_k), fn("w_v", w_v), fn("b_q", b_q), fn("b_k", b_k), fn("b_v", b_v);
    fn("p_g", p_g);
  }
  template <class Get>
  static AttentionWeights load(Get&& get) {
    return {get("w_q"), get("w_k"), get("w_v"), get("b_q"), get("b_k"), get("b_v"), get("p_g")};
  }
};

using GruParams = GruWeights<Tensor>;
using AttentionParams = AttentionWeights<Tensor>;

struct GatingConfig {
  std::size_t latent_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t n_experts = 4;

  std::size_t token_dim() const { return hidden_dim / n_experts; }
  void validate() const;  // ConfigError unless n divides d_h
};

struct GatingParams {
  GruParams gru;
  AttentionParams attention;
  std::size_t n_experts = 0;
};

GatingParams init_gating(const GatingConfig& cfg, std::mt19937_64& rng);
GatingParams zero_gating(const GatingConfig& cfg);

void store_gating(const GatingParams& params, ParamSet& out);
GatingParams load_gating(const ParamSet& in, std::size_t n_experts);

struct GateOutput {
  Tensor a;          // 1 x n
  Tensor h;          // 1 x d_h
  Tensor attention;  // n x n softmax(QK^T / sqrt(d_k))
};

// Traced forms. z is B x K (one latent per row); result B x d_h.
Var gru_step(Var z, const GruWeights<Var>& w, std::optional<Var> h_init = std::nullopt);

struct TracedGate {
  Var a;          // n x 1
  Var attention;  // n x n
};

// h is 1 x d_h.
TracedGate attention_gates(Var h, const AttentionWeights<Var>& w, std::size_t n);

// Plain evaluation.
Tensor gru_step(const Tensor& z, const GruParams& params, const Tensor* h_init = nullptr);
GateOutput attention_gates(const Tensor& h, const AttentionParams& params, std::size_t n);
GateOutput gate(const Tensor& z, const GatingParams& params);

}  // namespace moedis
