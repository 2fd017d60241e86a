#include "moedis/editor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "moedis/errors.hpp"
#include "moedis/linalg.hpp"
#include "moedis/parallel.hpp"

namespace moedis {

namespace {

Tensor step_along(const Tensor& z, const double* dir, double scale) {
  std::vector<double> out(z.data().begin(), z.data().end());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += scale * dir[k];
  const auto width = out.size();
  return Tensor({1, width}, std::move(out));
}

std::vector<int> labels_of(const Tensor& scores) {
  std::vector<int> out;
  for (double s : scores.data()) out.push_back(s >= 0.0 ? 1 : -1);
  return out;
}

std::vector<double> unit_row(const Tensor& m, std::size_t i) {
  std::vector<double> r(m.cols());
  double sq = 0.0;
  for (std::size_t k = 0; k < m.cols(); ++k) {
    r[k] = m.at(i, k);
    sq += r[k] * r[k];
  }
  const double norm = std::sqrt(sq);
  if (norm > 0.0)
    for (auto& x : r) x /= norm;
  return r;
}

}  // namespace

Tensor edit(const DifferentiableMap& g, const Tensor& w, const EditRequest& req) {
  if (req.attribute >= w.rows()) {
    throw ArgumentError("attribute index " + std::to_string(req.attribute) + " out of range for " +
                        std::to_string(w.rows()) + " semantic vectors");
  }
  if (!std::isfinite(req.xi)) throw ArgumentError("edit step must be finite");
  if (req.z.numel() != w.cols()) throw DimensionError("edit: latent and semantic vector widths differ");
  if (req.xi == 0.0) return g.generate(req.z);
  return g.generate(step_along(req.z, w.data().data() + req.attribute * w.cols(), req.xi));
}

DirectionProvider mdn_directions(const MdnParams& mdn) {
  return [mdn](const Tensor& z) { return semantic_vectors(mdn, z).w; };
}

DirectionProvider fixed_directions(Tensor w) {
  return [w = std::move(w)](const Tensor&) { return w; };
}

std::vector<double> calibrate_xi(const GeneratorModel& g, const Tensor& b, const Tensor& z, double coverage,
                                 double max_xi) {
  if (z.empty()) throw ArgumentError("calibration needs at least one latent");
  if (!(coverage > 0.0 && coverage <= 1.0) || !(max_xi > 0.0)) throw ConfigError("invalid calibration settings");
  const auto n = b.rows(), count = z.rows();
  constexpr int kBisections = 50;
  std::vector<double> flips(n * count);
  parallel_for(count, [&](std::size_t r) {
    const Tensor zr = z.row_at(r);
    const auto label = labels_of(attribute_oracle(g, zr));
    for (std::size_t i = 0; i < n; ++i) {
      auto dir = unit_row(b, i);
      for (auto& x : dir) x *= -label[i];
      auto flipped = [&](double xi) { return labels_of(attribute_oracle(g, step_along(zr, dir.data(), xi)))[i] != label[i]; };
      double magnitude = std::numeric_limits<double>::infinity();
      if (flipped(max_xi)) {
        double lo = 0.0, hi = max_xi;
        for (int it = 0; it < kBisections; ++it) {
          const double mid = 0.5 * (lo + hi);
          (flipped(mid) ? hi : lo) = mid;
        }
        magnitude = hi;
      }
      flips[i * count + r] = magnitude;
    }
  });
  std::vector<double> xi(n);
  const auto rank = std::size_t(std::ceil(coverage * double(count))) - 1;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> m(flips.begin() + std::ptrdiff_t(i * count), flips.begin() + std::ptrdiff_t((i + 1) * count));
    std::nth_element(m.begin(), m.begin() + std::ptrdiff_t(rank), m.end());
    xi[i] = std::min(m[rank], max_xi);
  }
  return xi;
}

CrossAlignment cross_alignment_report(const Tensor& w, const Tensor& b, const Tensor& j) {
  auto ga = ga_loss(w, b, j);
  CrossAlignment out;
  out.c = ga.parts.c;
  for (std::size_t i = 0; i < out.c.rows(); ++i) out.diag.push_back(out.c.at(i, i));
  out.summary = cross_stats(out.c);
  return out;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"xi", r.xi},
       {"AA", r.aa},
       {"AA_mean", r.aa_mean},
       {"IDS", r.ids},
       {"IDS_mean", r.ids_mean},
       {"feature_distance", r.feature_distance},
       {"C_diag_mean", r.c_diag_mean},
       {"C_offdiag_absmean", r.c_offdiag_absmean},
       {"w_norm_mean", r.w_norm_mean}};
}

EvalReport evaluate(const GeneratorModel& g, const DirectionProvider& directions, const Tensor& b, const Tensor& z,
                    const std::vector<double>& xi) {
  if (z.empty()) throw ArgumentError("evaluation dataset is empty");
  const auto count = z.rows(), n = g.n_attributes(), f = g.feature_dim();
  if (xi.size() != n || b.rows() != n) throw DimensionError("evaluate: need one step size and boundary per attribute");

  struct Row {
    std::vector<double> aa, ids, dist;
    double diag = 0.0, offdiag = 0.0, wnorm = 0.0;
  };
  std::vector<Row> rows(count);
  const Eigen::MatrixXd t = to_eigen(g.directions());

  parallel_for(count, [&](std::size_t r) {
    const Tensor zr = z.row_at(r);
    const Tensor w = directions(zr);
    if (w.rows() != n || w.cols() != z.cols()) throw DimensionError("direction provider returned the wrong shape");
    const Tensor jac = g.jacobian(zr);
    const Tensor x0 = g.generate(zr);
    const auto label = labels_of(g.readout(x0));

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(to_eigen(jac) * t.transpose());
    const auto rank = std::size_t(qr.rank());
    if (rank >= f) throw ConfigError("identity score: attribute directions leave no residual feature space");
    const Eigen::MatrixXd q = (qr.householderQ() * Eigen::MatrixXd::Identity(Eigen::Index(f), Eigen::Index(rank)));
    auto residual = [&](const Tensor& x) -> Eigen::VectorXd {
      const Eigen::VectorXd v = to_eigen(x).transpose();
      return v - q * (q.transpose() * v);
    };
    const Eigen::VectorXd r0 = residual(x0);

    const auto cross = cross_alignment_report(w, b, jac).summary;
    Row& out = rows[r];
    out.diag = cross.diag_mean;
    out.offdiag = cross.offdiag_absmean;
    for (std::size_t i = 0; i < n; ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < w.cols(); ++k) sq += w.at(i, k) * w.at(i, k);
      out.wnorm += std::sqrt(sq);

      const auto dir = unit_row(w, i);
      const double step = xi[i] * -label[i];
      const Tensor x1 = step == 0.0 || sq == 0.0 ? x0 : g.generate(step_along(zr, dir.data(), step));
      const auto after = labels_of(g.readout(x1));
      bool ok = after[i] != label[i];
      for (std::size_t j = 0; j < n && ok; ++j)
        if (j != i && after[j] != label[j]) ok = false;
      out.aa.push_back(ok ? 1.0 : 0.0);

      const Eigen::VectorXd r1 = residual(x1);
      double cosine;
      if (x1 == x0) {
        cosine = 1.0;
      } else {
        const double denom = r0.norm() * r1.norm();
        cosine = denom > 0.0 ? std::clamp(r0.dot(r1) / denom, -1.0, 1.0) : 0.0;
      }
      out.ids.push_back(0.5 * (cosine + 1.0));
      out.dist.push_back((to_eigen(x1) - to_eigen(x0)).norm() / std::sqrt(double(f)));
    }
  });

  EvalReport rep;
  rep.xi = xi;
  rep.aa.assign(n, 0.0);
  rep.ids.assign(n, 0.0);
  rep.feature_distance.assign(n, 0.0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < n; ++i) {
      rep.aa[i] += row.aa[i];
      rep.ids[i] += row.ids[i];
      rep.feature_distance[i] += row.dist[i];
    }
    rep.c_diag_mean += row.diag;
    rep.c_offdiag_absmean += row.offdiag;
    rep.w_norm_mean += row.wnorm;
  }
  const double inv = 1.0 / double(count);
  for (std::size_t i = 0; i < n; ++i) {
    rep.aa[i] *= inv;
    rep.ids[i] *= inv;
    rep.feature_distance[i] *= inv;
    rep.aa_mean += rep.aa[i] / double(n);
    rep.ids_mean += rep.ids[i] / double(n);
  }
  rep.c_diag_mean *= inv;
  rep.c_offdiag_absmean *= inv;
  rep.w_norm_mean *= inv / double(n);
  return rep;
}

}  // namespace moedis
