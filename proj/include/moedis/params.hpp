#pragma once

#include <map>
#include <random>
#include <string>

#include "moedis/autodiff.hpp"

namespace moedis {

// Trainable parameters by fully qualified name ("gating.gru.w_r", ...).
// Ordered, so iteration order (and thus optimizer and checkpoint order) is fixed.
using ParamSet = std::map<std::string, Tensor>;

class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad = true);

  Var operator()(const std::string& name) const;
  ParamSet gradients() const;

  // Lookup with a fixed prefix, e.g. scoped("gating.gru.")("w_r").
  auto scoped(std::string prefix) const {
    return [this, prefix = std::move(prefix)](const char* name) { return (*this)(prefix + name); };
  }

 private:
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

// Records every field of a weights struct (GruWeights<Tensor>, ...) as a tape
// constant and returns the matching Var-typed struct.
template <template <class> class W>
W<Var> bind_constants(Tape& tape, const W<Tensor>& params) {
  std::map<std::string, Tensor> named;
  params.each([&](const char* name, const Tensor& t) { named.emplace(name, t); });
  return W<Var>::load([&](const char* name) { return tape.constant(named.at(name)); });
}

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor uniform_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace moedis
