#pragma once

// Semantic edits G(z + xi w_i) and synthetic disentanglement metrics.

#include <cstddef>
#include <functional>
#include <vector>

#include "json.hpp"
#include "moedis/experts.hpp"
#include "moedis/generator.hpp"
#include "moedis/losses.hpp"

namespace moedis {

struct EditRequest {
  Tensor z;  // 1 x K
  std::size_t attribute = 0;
  double xi = 0.0;
};

// G(z + xi w_i) with w_i the raw row of W (n x K). ArgumentError for a bad
// index or non-finite xi.
Tensor edit(const DifferentiableMap& g, const Tensor& w, const EditRequest& req);

// Semantic vectors for a latent: n x K.
using DirectionProvider = std::function<Tensor(const Tensor& z)>;
DirectionProvider mdn_directions(const MdnParams& mdn);
DirectionProvider fixed_directions(Tensor w);

// Per attribute, the smallest step such that moving along the unit SBV normal
// toward the opposite label flips the oracle label on >= `coverage` of the
// latents (rows of z). Flip magnitudes are found by bisection on [0, max_xi].
std::vector<double> calibrate_xi(const GeneratorModel& g, const Tensor& b, const Tensor& z, double coverage = 0.95,
                                 double max_xi = 20.0);

struct CrossAlignment {
  Tensor c;  // n x n
  std::vector<double> diag;
  CrossStats summary;
};
CrossAlignment cross_alignment_report(const Tensor& w, const Tensor& b, const Tensor& j);

struct EvalReport {
  std::vector<double> xi;
  std::vector<double> aa;
  double aa_mean = 0.0;
  std::vector<double> ids;
  double ids_mean = 0.0;
  std::vector<double> feature_distance;
  double c_diag_mean = 0.0;
  double c_offdiag_absmean = 0.0;
  double w_norm_mean = 0.0;  // mean ||w_i|| over latents and attributes
};
void to_json(nlohmann::json& j, const EvalReport& r);

// Edits use the unit direction w_i / ||w_i|| scaled by xi[i], signed toward the
// opposite of the latent's current label for attribute i.
//  AA_i:  target label flips and no other label changes.
//  IDS_i: mean (cos + 1) / 2 between original and edited features after
//         projecting out span{J(z) T_j^T}; ConfigError if nothing is left.
// ArgumentError on an empty dataset.
EvalReport evaluate(const GeneratorModel& g, const DirectionProvider& directions, const Tensor& b, const Tensor& z,
                    const std::vector<double>& xi);

}  // namespace moedis
