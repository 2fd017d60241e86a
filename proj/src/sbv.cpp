#include "moedis/sbv.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "moedis/errors.hpp"
#include "moedis/linalg.hpp"
#include "moedis/parallel.hpp"

namespace moedis {

void FitConfig::validate() const {
  if (!(lambda >= 0.0) || !(grad_tol > 0.0) || max_iters == 0) throw ConfigError("invalid SBV fit settings");
  if (!(holdout_frac >= 0.0 && holdout_frac < 1.0)) throw ConfigError("holdout fraction must lie in [0, 1)");
}

namespace {

struct LinearFit {
  Eigen::VectorXd w;
  double c = 0.0;
  FitDiagnostics diag;
};

double accuracy(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double c) {
  if (x.rows() == 0) return 0.0;
  const Eigen::VectorXd margin = x * w;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) hits += ((margin(i) + c >= 0.0 ? 1.0 : -1.0) == y(i));
  return double(hits) / double(x.rows());
}

// Nesterov accelerated gradient with gradient-based adaptive restart on the
// mean logistic loss plus (lambda/2)|w|^2; the intercept is unregularized.
LinearFit logistic_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const FitConfig& cfg) {
  const Eigen::Index n = x.rows(), k = x.cols();
  Eigen::MatrixXd xa(n, k + 1);
  xa << x, Eigen::VectorXd::Ones(n);

  const Eigen::MatrixXd gram = xa.transpose() * xa / double(n);
  const double lipschitz = 0.25 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram).eigenvalues().maxCoeff() +
                           cfg.lambda;
  const double step = 1.0 / lipschitz;

  auto grad = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd m = xa * theta;
    Eigen::VectorXd coef(n);
    for (Eigen::Index i = 0; i < n; ++i) coef(i) = -y(i) / (1.0 + std::exp(y(i) * m(i)));
    Eigen::VectorXd g = xa.transpose() * coef / double(n);
    g.head(k) += cfg.lambda * theta.head(k);
    return g;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(k + 1), look = theta;
  double t = 1.0;
  LinearFit fit;
  Eigen::VectorXd g = grad(theta);
  std::size_t it = 0;
  while (g.norm() >= cfg.grad_tol && it < cfg.max_iters) {
    const Eigen::VectorXd g_look = grad(look);
    const Eigen::VectorXd next = look - step * g_look;
    const Eigen::VectorXd delta = next - theta;
    if (g_look.dot(delta) > 0.0) {
      t = 1.0;
      look = next;
    } else {
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      look = next + ((t - 1.0) / t_next) * delta;
      t = t_next;
    }
    theta = next;
    g = grad(theta);
    ++it;
  }
  fit.w = theta.head(k);
  fit.c = theta(k);
  fit.diag.iterations = it;
  fit.diag.grad_norm = g.norm();
  fit.diag.converged = g.norm() < cfg.grad_tol;
  return fit;
}

}  // namespace

BoundarySet fit_boundaries(const LabeledDataset& data, const FitConfig& cfg) {
  cfg.validate();
  const auto total = data.size();
  if (total < cfg.min_samples) {
    throw DegenerateDataError("need at least " + std::to_string(cfg.min_samples) + " samples, got " +
                              std::to_string(total));
  }
  const auto n_attr = data.labels.front().size();
  const auto k = data.z.cols();
  const auto holdout = std::size_t(std::floor(double(total) * cfg.holdout_frac));
  const auto n_train = total - holdout;

  const Eigen::MatrixXd z = to_eigen(data.z);
  const Eigen::MatrixXd x_train = z.topRows(Eigen::Index(n_train));
  const Eigen::MatrixXd x_hold = z.bottomRows(Eigen::Index(holdout));

  std::vector<LinearFit> fits(n_attr);
  parallel_for(n_attr, [&](std::size_t a) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(total));
    for (std::size_t r = 0; r < total; ++r) y(Eigen::Index(r)) = data.labels[r][a];
    const Eigen::VectorXd y_train = y.head(Eigen::Index(n_train));
    if (y_train.maxCoeff() == y_train.minCoeff()) {
      throw DegenerateDataError("attribute " + std::to_string(a) + " has a single label class");
    }
    auto fit = logistic_fit(x_train, y_train, cfg);
    fit.diag.train_accuracy = accuracy(x_train, y_train, fit.w, fit.c);
    fit.diag.holdout_accuracy =
        holdout ? accuracy(x_hold, y.tail(Eigen::Index(holdout)), fit.w, fit.c) : fit.diag.train_accuracy;
    fits[a] = std::move(fit);
  });

  BoundarySet out;
  std::vector<double> b;
  b.reserve(n_attr * k);
  for (std::size_t a = 0; a < n_attr; ++a) {
    auto& fit = fits[a];
    if (fit.diag.holdout_accuracy < cfg.min_accuracy) {
      throw FitError("attribute " + std::to_string(a) + ": held-out accuracy " +
                     std::to_string(fit.diag.holdout_accuracy) + " below " + std::to_string(cfg.min_accuracy));
    }
    const double norm = fit.w.norm();
    if (!(norm > 0.0)) throw DegenerateDataError("attribute " + std::to_string(a) + " fitted a zero normal");
    for (Eigen::Index j = 0; j < fit.w.size(); ++j) b.push_back(fit.w(j) / norm);
    out.intercepts.push_back(fit.c / norm);
    out.diagnostics.push_back(fit.diag);
  }
  out.b = Tensor({n_attr, k}, std::move(b));
  return out;
}

void BoundarySet::store(Checkpoint& ckpt) const {
  ckpt.put("sbv.B", b);
  ckpt.put("sbv.intercepts", Tensor::row(intercepts));
  nlohmann::json diag = nlohmann::json::array();
  for (const auto& d : diagnostics) {
    diag.push_back({{"train_accuracy", d.train_accuracy},
                    {"holdout_accuracy", d.holdout_accuracy},
                    {"iterations", d.iterations},
                    {"grad_norm", d.grad_norm},
                    {"converged", d.converged}});
  }
  ckpt.meta["sbv"] = {{"diagnostics", diag}};
}

BoundarySet BoundarySet::load(const Checkpoint& ckpt) {
  BoundarySet out;
  out.b = ckpt.get("sbv.B");
  out.intercepts = ckpt.get("sbv.intercepts").vector();
  if (out.intercepts.size() != out.b.rows()) throw FormatError("sbv.intercepts does not match sbv.B");
  for (std::size_t i = 0; i < out.b.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < out.b.cols(); ++j) s += out.b.at(i, j) * out.b.at(i, j);
    if (std::abs(std::sqrt(s) - 1.0) > 1e-10) throw FormatError("sbv.B rows must be unit length");
  }
  if (ckpt.meta.contains("sbv")) {
    for (const auto& d : ckpt.meta.at("sbv").at("diagnostics")) {
      out.diagnostics.push_back({d.at("train_accuracy"), d.at("holdout_accuracy"), d.at("iterations"),
                                 d.at("grad_norm"), d.at("converged")});
    }
  }
  return out;
}

}  // namespace moedis
