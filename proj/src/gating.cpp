#include "moedis/gating.hpp"

#include <cmath>
#include <string>

#include "moedis/errors.hpp"

namespace moedis {

void GatingConfig::validate() const {
  if (latent_dim == 0 || hidden_dim == 0 || n_experts == 0) throw ConfigError("gating sizes must be positive");
  if (hidden_dim % n_experts != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden_dim) + " is not divisible by expert count " +
                      std::to_string(n_experts));
  }
}

GatingParams init_gating(const GatingConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const auto k = cfg.latent_dim, dh = cfg.hidden_dim, dt = cfg.token_dim();
  GatingParams p;
  p.n_experts = cfg.n_experts;
  p.gru.w_r = uniform_init({dh, k}, k, rng);
  p.gru.u_r = uniform_init({dh, dh}, dh, rng);
  p.gru.w_u = uniform_init({dh, k}, k, rng);
  p.gru.u_u = uniform_init({dh, dh}, dh, rng);
  p.gru.w_h = uniform_init({dh, dh}, dh, rng);
  p.gru.u_h = uniform_init({dh, dh}, dh, rng);
  p.gru.b_r = uniform_init({1, dh}, dh, rng);
  p.gru.b_u = uniform_init({1, dh}, dh, rng);
  p.gru.b_h = uniform_init({1, dh}, dh, rng);
  p.attention.w_q = uniform_init({dt, dt}, dt, rng);
  p.attention.w_k = uniform_init({dt, dt}, dt, rng);
  p.attention.w_v = uniform_init({dt, dt}, dt, rng);
  p.attention.b_q = uniform_init({1, dt}, dt, rng);
  p.attention.b_k = uniform_init({1, dt}, dt, rng);
  p.attention.b_v = uniform_init({1, dt}, dt, rng);
  p.attention.p_g = uniform_init({1, dt}, dt, rng);
  return p;
}

GatingParams zero_gating(const GatingConfig& cfg) {
  cfg.validate();
  const auto k = cfg.latent_dim, dh = cfg.hidden_dim, dt = cfg.token_dim();
  GatingParams p;
  p.n_experts = cfg.n_experts;
  p.gru = {Tensor::zeros({dh, k}),  Tensor::zeros({dh, dh}), Tensor::zeros({dh, k}),
           Tensor::zeros({dh, dh}), Tensor::zeros({dh, dh}), Tensor::zeros({dh, dh}),
           Tensor::zeros({1, dh}),  Tensor::zeros({1, dh}),  Tensor::zeros({1, dh})};
  p.attention = {Tensor::zeros({dt, dt}), Tensor::zeros({dt, dt}), Tensor::zeros({dt, dt}), Tensor::zeros({1, dt}),
                 Tensor::zeros({1, dt}),  Tensor::zeros({1, dt}),  Tensor::zeros({1, dt})};
  return p;
}

void store_gating(const GatingParams& params, ParamSet& out) {
  params.gru.each([&](const char* name, const Tensor& t) { out.insert_or_assign(std::string("gating.gru.") + name, t); });
  params.attention.each(
      [&](const char* name, const Tensor& t) { out.insert_or_assign(std::string("gating.attn.") + name, t); });
}

GatingParams load_gating(const ParamSet& in, std::size_t n_experts) {
  auto from = [&](std::string prefix) {
    return [&in, prefix](const char* name) {
      auto it = in.find(prefix + name);
      if (it == in.end()) throw ArgumentError("missing parameter " + prefix + name);
      return it->second;
    };
  };
  GatingParams p;
  p.gru = GruParams::load(from("gating.gru."));
  p.attention = AttentionParams::load(from("gating.attn."));
  p.n_experts = n_experts;
  return p;
}

namespace {

Var affine(Var x, Var weight, Var bias) {
  return add(matmul(x, transpose(weight)), broadcast_rows(bias, x.rows()));
}

}  // namespace

Var gru_step(Var z, const GruWeights<Var>& w, std::optional<Var> h_init) {
  const auto k = w.w_r.cols();
  const auto dh = w.w_r.rows();
  if (z.cols() != k) {
    throw DimensionError("gru_step: latent has " + std::to_string(z.cols()) + " entries, weights expect " +
                         std::to_string(k));
  }
  if (w.w_h.rows() != dh || w.w_h.cols() != dh || w.u_h.cols() != dh) {
    throw DimensionError("gru_step: recurrent weights must be d_h x d_h");
  }
  Tape& tape = z.tape();
  const auto batch = z.rows();
  Var h0 = h_init ? *h_init : tape.constant(Tensor::zeros({batch, dh}));
  if (h0.rows() != batch || h0.cols() != dh) throw DimensionError("gru_step: initial state shape mismatch");

  Var r = sigmoid(add(affine(z, w.w_r, w.b_r), matmul(h0, transpose(w.u_r))));
  Var u = sigmoid(add(affine(z, w.w_u, w.b_u), matmul(h0, transpose(w.u_u))));
  Var candidate = tanh(add(affine(u, w.w_h, w.b_h), matmul(mul(r, h0), transpose(w.u_h))));
  Var keep = shift(scale(u, -1.0), 1.0);
  return add(mul(keep, h0), mul(u, candidate));
}

TracedGate attention_gates(Var h, const AttentionWeights<Var>& w, std::size_t n) {
  if (n == 0 || h.rows() != 1) throw DimensionError("attention_gates: expects a single 1 x d_h state");
  const auto dh = h.cols();
  if (dh % n != 0) {
    throw ConfigError("attention_gates: d_h=" + std::to_string(dh) + " not divisible by n=" + std::to_string(n));
  }
  const auto dt = dh / n;
  if (w.w_q.cols() != dt) throw DimensionError("attention_gates: projection width does not match token width");
  const auto dk = w.w_q.rows();

  Var tokens = reshape(h, {n, dt});
  Var q = affine(tokens, w.w_q, w.b_q);
  Var k = affine(tokens, w.w_k, w.b_k);
  Var v = affine(tokens, w.w_v, w.b_v);
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  Var attn = softmax(scores, 1);
  Var mixed = matmul(attn, v);
  Var a = sigmoid(matmul(mixed, transpose(w.p_g)));
  return {a, attn};
}

Tensor gru_step(const Tensor& z, const GruParams& params, const Tensor* h_init) {
  Tape tape;
  std::optional<Var> h0;
  if (h_init) h0 = tape.constant(*h_init);
  return gru_step(tape.constant(z), bind_constants(tape, params), h0).value();
}

GateOutput attention_gates(const Tensor& h, const AttentionParams& params, std::size_t n) {
  Tape tape;
  auto traced = attention_gates(tape.constant(h), bind_constants(tape, params), n);
  return {traced.a.value().reshaped({1, n}), h, traced.attention.value()};
}

GateOutput gate(const Tensor& z, const GatingParams& params) {
  if (z.rows() != 1) throw DimensionError("gate: expects a single 1 x K latent");
  return attention_gates(gru_step(z, params.gru), params.attention, params.n_experts);
}

}  // namespace moedis
