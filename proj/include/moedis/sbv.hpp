#pragma once

// Semantic boundary vectors: unit normals of per-attribute linear decision
// hyperplanes in latent space, fitted by L2-regularized logistic regression.

#include <cstddef>
#include <vector>

#include "moedis/checkpoint.hpp"
#include "moedis/generator.hpp"
#include "moedis/tensor.hpp"

namespace moedis {

struct FitConfig {
  double lambda = 1e-4;
  double grad_tol = 1e-6;
  std::size_t max_iters = 10000;
  std::size_t min_samples = 200;
  double holdout_frac = 0.2;  // last fraction of the samples; 0 scores on the training set
  double min_accuracy = 0.9;

  void validate() const;
};

struct FitDiagnostics {
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
  std::size_t iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

struct BoundarySet {
  Tensor b;                        // n x K, unit rows
  std::vector<double> intercepts;  // scaled with the same factor as b
  std::vector<FitDiagnostics> diagnostics;

  std::size_t size() const { return b.rows(); }
  void store(Checkpoint& ckpt) const;  // sbv.B, sbv.intercepts
  static BoundarySet load(const Checkpoint& ckpt);
};

// One hyperplane per label column. DegenerateDataError for a single class or
// too few samples; FitError when held-out accuracy misses cfg.min_accuracy.
BoundarySet fit_boundaries(const LabeledDataset& data, const FitConfig& cfg = {});

}  // namespace moedis
