#pragma once

// Synthetic frozen generators G: R^K -> R^F with known attribute directions.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moedis/autodiff.hpp"
#include "moedis/checkpoint.hpp"

namespace moedis {

enum class GeneratorKind { kLinear, kMlp };

std::string to_string(GeneratorKind kind);
GeneratorKind parse_generator_kind(const std::string& s);  // ConfigError on unknown

struct GeneratorConfig {
  GeneratorKind kind = GeneratorKind::kLinear;
  std::size_t latent_dim = 16;
  std::size_t feature_dim = 64;
  std::size_t hidden_dim = 32;  // mlp only
  std::size_t n_attributes = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

// What training may see of a generator: forward map and Jacobian, no labels.
class DifferentiableMap {
 public:
  virtual ~DifferentiableMap() = default;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual Tensor generate(const Tensor& z) const = 0;  // 1 x K -> 1 x F
  virtual Tensor jacobian(const Tensor& z) const = 0;  // F x K
};

class GeneratorModel : public DifferentiableMap {
 public:
  // Draws the frozen weights and the orthonormal directions T from cfg.seed.
  explicit GeneratorModel(const GeneratorConfig& cfg);

  const GeneratorConfig& config() const { return cfg_; }
  GeneratorKind kind() const { return cfg_.kind; }
  std::size_t latent_dim() const override { return cfg_.latent_dim; }
  std::size_t feature_dim() const override { return cfg_.feature_dim; }
  std::size_t n_attributes() const { return cfg_.n_attributes; }

  const Tensor& directions() const { return t_; }  // n x K, orthonormal rows

  Tensor generate(const Tensor& z) const override;
  Tensor jacobian(const Tensor& z) const override;
  Var trace(Tape& tape, Var z) const;      // B x K -> B x F

  // R(x) = T pinv(J0) (x - G(0)); 1 x F -> 1 x n. Counted like attribute_oracle.
  Tensor readout(const Tensor& x) const;

  void store(Checkpoint& ckpt) const;
  static GeneratorModel load(const Checkpoint& ckpt);

 private:
  GeneratorModel() = default;
  void finish();

  GeneratorConfig cfg_;
  Tensor a_;                // linear: F x K
  Tensor w1_, b1_, w2_, b2_;  // mlp: H x K, 1 x H, F x H, 1 x F
  Tensor a_t_, w1_t_, w2_t_;  // cached transposes for the traced forward
  Tensor t_;
  Tensor readout_;  // n x F
  Tensor origin_;   // G(0)
};

// Attribute scores R(G(z)); the sign of entry i is the ground-truth label.
// Every readout is counted so tests can assert training never consults labels.
Tensor attribute_oracle(const GeneratorModel& g, const Tensor& z);
std::uint64_t attribute_oracle_calls();

// Standard normal latents, one per row of the result (count x K).
Tensor sample_latents(std::size_t count, std::size_t latent_dim, std::uint64_t seed);

struct LabeledDataset {
  Tensor z;                             // N x K
  std::vector<std::vector<int>> labels;  // N rows of +-1, one per attribute
  std::size_t size() const { return z.rows(); }
};

LabeledDataset label_latents(const GeneratorModel& g, const Tensor& z);

// One JSON object per line: {"z": [...], "labels": [...]}.
std::string dataset_to_jsonl(const LabeledDataset& data);
LabeledDataset dataset_from_jsonl(const std::string& text);  // FormatError on malformed lines

}  // namespace moedis
