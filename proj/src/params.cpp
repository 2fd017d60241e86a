#include "moedis/params.hpp"

#include <cmath>

#include "moedis/errors.hpp"

namespace moedis {

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool requires_grad) : tape_(&tape) {
  for (const auto& [name, value] : params) vars_.emplace(name, tape.leaf(value, requires_grad));
}

Var BoundParams::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

ParamSet BoundParams::gradients() const {
  ParamSet out;
  for (const auto& [name, var] : vars_) out.emplace(name, tape_->grad(var));
  return out;
}

Tensor uniform_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(shape, std::move(data));
}

}  // namespace moedis
