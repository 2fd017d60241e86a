#include "moedis/losses.hpp"

#include <cmath>
#include <string>

#include "moedis/errors.hpp"

namespace moedis {

namespace {

Var column_norms(Var m, char label) {
  Var norms = sqrt(sum_rows(mul(m, m)));
  const auto& values = norms.value();
  for (std::size_t i = 0; i < values.numel(); ++i) {
    if (!(values[i] >= kCollapseNorm)) {
      throw DirectionCollapseError(i, std::string("pushforward column ") + label + "_" + std::to_string(i) +
                                          " has vanishing norm for attribute " + std::to_string(i));
    }
  }
  return norms;
}

}  // namespace

TracedGa ga_loss(Var w, const Tensor& b, const Tensor& j) {
  auto& tape = w.tape();
  const auto n = w.rows();
  if (b.rows() != n || b.cols() != w.cols() || j.cols() != w.cols()) {
    throw DimensionError("ga_loss: W " + shape_string(w.shape()) + ", B " + shape_string(b.shape()) + ", J " +
                         shape_string(j.shape()) + " do not line up");
  }
  Var jc = tape.constant(j);
  TracedGa out;
  auto& p = out.parts;
  p.u = matmul(jc, transpose(w));
  p.v = matmul(jc, transpose(tape.constant(b)));
  p.norm_u = column_norms(p.u, 'U');
  p.norm_v = column_norms(p.v, 'V');
  const auto f = j.rows();
  p.u_hat = div(p.u, broadcast_rows(p.norm_u, f));
  p.v_hat = div(p.v, broadcast_rows(p.norm_v, f));
  p.c = matmul(transpose(p.u_hat), p.v_hat);
  Var diff = sub(p.c, tape.constant(Tensor::identity(n)));
  out.loss = sum(mul(diff, diff));
  return out;
}

GaResult ga_loss(const Tensor& w, const Tensor& b, const Tensor& j) {
  Tape tape;
  auto traced = ga_loss(tape.constant(w), b, j);
  const auto& p = traced.parts;
  return {traced.loss.value().item(),
          {p.u.value(), p.v.value(), p.norm_u.value(), p.norm_v.value(), p.u_hat.value(), p.v_hat.value(),
           p.c.value()}};
}

void PpaConfig::validate() const {
  if (!(beta > 0.0) || !(r_temp > 0.0) || !(sigma_q > 0.0)) {
    throw ConfigError("PPA needs beta, r_temp and sigma_q all positive");
  }
}

Var ppa_loss(Var w, const PpaConfig& cfg) {
  cfg.validate();
  const double n = double(w.rows()), k = double(w.cols());
  const double s2 = cfg.sigma_q * cfg.sigma_q;
  // sum_i KL_i = 0.5 * sum |w_i|^2 + n * 0.5 * (K s2 - K - K ln s2)
  const double constant = n * 0.5 * (k * s2 - k - k * std::log(s2));
  Var kl = shift(scale(sum(mul(w, w)), 0.5), constant);
  return scale(kl, cfg.beta / (n * cfg.r_temp));
}

double ppa_loss(const Tensor& w, const PpaConfig& cfg) {
  Tape tape;
  return ppa_loss(tape.constant(w), cfg).value().item();
}

double total_loss(double ga, double ppa) {
  if (!std::isfinite(ga) || !std::isfinite(ppa)) throw NumericError("total_loss: non-finite loss term");
  return ga + ppa;
}

Var total_loss(Var ga, Var ppa) {
  total_loss(ga.value().item(), ppa.value().item());
  return add(ga, ppa);
}

CrossStats cross_stats(const Tensor& c) {
  const auto n = c.rows();
  CrossStats s;
  for (std::size_t i = 0; i < n; ++i) {
    s.diag_mean += c.at(i, i);
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s.offdiag_absmean += std::abs(c.at(i, j));
  }
  s.diag_mean /= double(n);
  if (n > 1) s.offdiag_absmean /= double(n * (n - 1));
  return s;
}

}  // namespace moedis
