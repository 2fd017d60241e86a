#pragma once

// Geometry-aware alignment loss and posterior-prior alignment loss.

#include <cstddef>

#include "moedis/autodiff.hpp"

namespace moedis {

// U = J W^T and V = J B^T (F x n), their column norms (1 x n), the normalized
// columns and the cross matrix C = U^T-hat V-hat (n x n).
template <class T>
struct GaParts {
  T u, v, norm_u, norm_v, u_hat, v_hat, c;
};

struct TracedGa {
  Var loss;  // 1 x 1
  GaParts<Var> parts;
};

// ||C - I||_F^2. W is n x K and carries gradients; B (n x K) and J (F x K) are
// recorded as constants. DirectionCollapseError when a column norm of U or V
// falls below 1e-12.
TracedGa ga_loss(Var w, const Tensor& b, const Tensor& j);

struct GaResult {
  double loss = 0.0;
  GaParts<Tensor> parts;
};
GaResult ga_loss(const Tensor& w, const Tensor& b, const Tensor& j);

inline constexpr double kCollapseNorm = 1e-12;

struct PpaConfig {
  double beta = 0.5;
  double r_temp = 0.5;
  double sigma_q = 1.0;

  void validate() const;  // ConfigError unless all three are positive
};

// (beta / n) (1 / r) sum_i KL(N(w_i, sigma_q^2 I) || N(0, I)).
Var ppa_loss(Var w, const PpaConfig& cfg);
double ppa_loss(const Tensor& w, const PpaConfig& cfg);

// L_GA + L_PPA; NumericError if either term is non-finite.
double total_loss(double ga, double ppa);
Var total_loss(Var ga, Var ppa);

// Mean of diag(C) and mean |C_ij| over i != j.
struct CrossStats {
  double diag_mean = 0.0;
  double offdiag_absmean = 0.0;
};
CrossStats cross_stats(const Tensor& c);

}  // namespace moedis
