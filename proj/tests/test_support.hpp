#pragma once

// Independent numerical oracles for the unit and acceptance suites. Nothing
// here goes through the tape: finite differences evaluate the plain forward
// function only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "moedis/autodiff.hpp"
#include "moedis/tensor.hpp"

namespace moedis::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(shape, std::move(data));
}

inline Tensor with_entry(const Tensor& x, std::size_t i, double delta) {
  auto data = x.vector();
  data[i] += delta;
  return Tensor(x.shape(), std::move(data));
}

// Central-difference gradient of a scalar function.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    g[i] = (f(with_entry(x, i, h)) - f(with_entry(x, i, -h))) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

// Central-difference directional derivative (f(z+hv) - f(z-hv)) / 2h.
inline Tensor fd_directional(const std::function<Tensor(const Tensor&)>& f, const Tensor& z, const Tensor& v,
                             double h = 1e-5) {
  std::vector<double> plus(z.numel()), minus(z.numel());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    plus[i] = z[i] + h * v[i];
    minus[i] = z[i] - h * v[i];
  }
  const auto fp = f(Tensor(z.shape(), plus));
  const auto fm = f(Tensor(z.shape(), minus));
  std::vector<double> out(fp.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (fp[i] - fm[i]) / (2.0 * h);
  return Tensor(fp.shape(), std::move(out));
}

// Central-difference Jacobian (F x K) of f: 1xK -> 1xF.
inline Tensor fd_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& z, double h = 1e-5) {
  const auto k = z.numel();
  std::vector<Tensor> cols;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> e(k, 0.0);
    e[c] = 1.0;
    cols.push_back(fd_directional(f, z, Tensor(z.shape(), e), h));
  }
  const auto fdim = cols.front().numel();
  std::vector<double> jac(fdim * k);
  for (std::size_t r = 0; r < fdim; ++r)
    for (std::size_t c = 0; c < k; ++c) jac[r * k + c] = cols[c][r];
  return Tensor({fdim, k}, std::move(jac));
}

inline double norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(norm(a), norm(b));
  if (scale < 1e-300) return 0.0;
  return std::sqrt(diff) / scale;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace moedis::testing
