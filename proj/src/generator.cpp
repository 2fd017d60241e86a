#include "moedis/generator.hpp"

#include <atomic>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "json.hpp"
#include "moedis/errors.hpp"
#include "moedis/linalg.hpp"

namespace moedis {

std::string to_string(GeneratorKind kind) { return kind == GeneratorKind::kLinear ? "linear" : "mlp"; }

GeneratorKind parse_generator_kind(const std::string& s) {
  if (s == "linear") return GeneratorKind::kLinear;
  if (s == "mlp") return GeneratorKind::kMlp;
  throw ConfigError("unknown generator kind '" + s + "' (expected linear or mlp)");
}

void GeneratorConfig::validate() const {
  if (latent_dim == 0 || n_attributes == 0) throw ConfigError("generator sizes must be positive");
  if (n_attributes > latent_dim) throw ConfigError("more attributes than latent dimensions");
  if (feature_dim < latent_dim) throw ConfigError("generator needs F >= K");
  if (kind == GeneratorKind::kMlp && (hidden_dim < latent_dim || hidden_dim > feature_dim)) {
    throw ConfigError("mlp generator needs F >= hidden >= K");
  }
}

namespace {

Eigen::MatrixXd gaussian(std::size_t rows, std::size_t cols, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
  return m;
}

// Orthonormal columns spanning a random subspace (rows x cols, rows >= cols).
Eigen::MatrixXd random_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(rows, cols, 1.0, rng));
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

std::atomic<std::uint64_t> g_oracle_calls{0};

}  // namespace

GeneratorModel::GeneratorModel(const GeneratorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const auto k = cfg_.latent_dim, f = cfg_.feature_dim, n = cfg_.n_attributes;

  const Eigen::MatrixXd basis = random_orthonormal(k, k, rng).transpose();  // rows orthonormal
  const Eigen::MatrixXd t = basis.topRows(n);
  t_ = from_eigen(t);

  if (cfg_.kind == GeneratorKind::kLinear) {
    // Identity on span(T), random positive gains on its complement.
    std::uniform_real_distribution<double> log_gain(std::log(0.3), std::log(3.0));
    const Eigen::MatrixXd rest = basis.bottomRows(k - n);
    Eigen::VectorXd gains(k - n);
    for (Eigen::Index i = 0; i < gains.size(); ++i) gains(i) = std::exp(log_gain(rng));
    const Eigen::MatrixXd m = t.transpose() * t + rest.transpose() * gains.asDiagonal() * rest;
    a_ = from_eigen(random_orthonormal(f, k, rng) * m);
  } else {
    const auto h = cfg_.hidden_dim;
    w1_ = from_eigen(gaussian(h, k, 1.0 / std::sqrt(double(k)), rng));
    b1_ = from_eigen(gaussian(1, h, 1.0 / std::sqrt(double(k)), rng));
    w2_ = from_eigen(gaussian(f, h, 1.0 / std::sqrt(double(h)), rng));
    b2_ = from_eigen(gaussian(1, f, 1.0 / std::sqrt(double(h)), rng));
  }
  finish();
}

void GeneratorModel::finish() {
  if (cfg_.kind == GeneratorKind::kLinear) {
    a_t_ = transpose_of(a_);
  } else {
    w1_t_ = transpose_of(w1_);
    w2_t_ = transpose_of(w2_);
  }
  const Tensor zero = Tensor::zeros({1, cfg_.latent_dim});
  origin_ = generate(zero);
  const Eigen::MatrixXd pinv = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(to_eigen(jacobian(zero)))
                                   .pseudoInverse();
  readout_ = from_eigen(to_eigen(t_) * pinv);
}

Var GeneratorModel::trace(Tape& tape, Var z) const {
  if (z.cols() != cfg_.latent_dim) {
    throw DimensionError("generator expects latent width " + std::to_string(cfg_.latent_dim) + ", got " +
                         std::to_string(z.cols()));
  }
  if (cfg_.kind == GeneratorKind::kLinear) return matmul(z, tape.constant(a_t_));
  const auto b = z.rows();
  Var hidden = tanh(add(matmul(z, tape.constant(w1_t_)), broadcast_rows(tape.constant(b1_), b)));
  return add(matmul(hidden, tape.constant(w2_t_)), broadcast_rows(tape.constant(b2_), b));
}

Tensor GeneratorModel::generate(const Tensor& z) const {
  if (z.rows() != 1) throw DimensionError("generate expects a single 1 x K latent");
  Tape tape;
  return trace(tape, tape.constant(z)).value();
}

Tensor GeneratorModel::jacobian(const Tensor& z) const {
  if (z.rows() != 1 || z.cols() != cfg_.latent_dim) throw DimensionError("jacobian expects a 1 x K latent");
  if (cfg_.kind == GeneratorKind::kLinear) return a_;
  return moedis::jacobian([this](Tape& tape, Var x) { return trace(tape, x); }, z);
}

Tensor GeneratorModel::readout(const Tensor& x) const {
  g_oracle_calls.fetch_add(1, std::memory_order_relaxed);
  if (x.numel() != cfg_.feature_dim) throw DimensionError("readout expects a 1 x F image");
  const Eigen::VectorXd d = to_eigen(x).transpose() - to_eigen(origin_).transpose();
  return from_eigen((to_eigen(readout_) * d).transpose());
}

void GeneratorModel::store(Checkpoint& ckpt) const {
  ckpt.meta["generator"] = {{"kind", to_string(cfg_.kind)},
                            {"latent_dim", cfg_.latent_dim},
                            {"feature_dim", cfg_.feature_dim},
                            {"hidden_dim", cfg_.hidden_dim},
                            {"n_attributes", cfg_.n_attributes},
                            {"seed", cfg_.seed}};
  ckpt.put("generator.T", t_);
  if (cfg_.kind == GeneratorKind::kLinear) {
    ckpt.put("generator.A", a_);
  } else {
    ckpt.put("generator.w1", w1_);
    ckpt.put("generator.b1", b1_);
    ckpt.put("generator.w2", w2_);
    ckpt.put("generator.b2", b2_);
  }
}

GeneratorModel GeneratorModel::load(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("generator")) throw FormatError("checkpoint carries no generator");
  const auto& m = ckpt.meta.at("generator");
  GeneratorModel g;
  g.cfg_.kind = parse_generator_kind(m.at("kind").get<std::string>());
  g.cfg_.latent_dim = m.at("latent_dim").get<std::size_t>();
  g.cfg_.feature_dim = m.at("feature_dim").get<std::size_t>();
  g.cfg_.hidden_dim = m.at("hidden_dim").get<std::size_t>();
  g.cfg_.n_attributes = m.at("n_attributes").get<std::size_t>();
  g.cfg_.seed = m.at("seed").get<std::uint64_t>();
  g.cfg_.validate();
  g.t_ = ckpt.get("generator.T");
  if (g.cfg_.kind == GeneratorKind::kLinear) {
    g.a_ = ckpt.get("generator.A");
  } else {
    g.w1_ = ckpt.get("generator.w1");
    g.b1_ = ckpt.get("generator.b1");
    g.w2_ = ckpt.get("generator.w2");
    g.b2_ = ckpt.get("generator.b2");
  }
  g.finish();
  return g;
}

Tensor attribute_oracle(const GeneratorModel& g, const Tensor& z) {
  return g.readout(g.generate(z));
}

std::uint64_t attribute_oracle_calls() { return g_oracle_calls.load(std::memory_order_relaxed); }

Tensor sample_latents(std::size_t count, std::size_t latent_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(count * latent_dim);
  for (auto& x : v) x = dist(rng);
  return Tensor({count, latent_dim}, std::move(v));
}

LabeledDataset label_latents(const GeneratorModel& g, const Tensor& z) {
  LabeledDataset out{z, {}};
  out.labels.reserve(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto scores = attribute_oracle(g, z.row_at(r));
    std::vector<int> row;
    for (double s : scores.data()) row.push_back(s >= 0.0 ? 1 : -1);
    out.labels.push_back(std::move(row));
  }
  return out;
}

std::string dataset_to_jsonl(const LabeledDataset& data) {
  std::string out;
  for (std::size_t r = 0; r < data.size(); ++r) {
    nlohmann::json line = {{"z", data.z.row_at(r).vector()}, {"labels", data.labels[r]}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

LabeledDataset dataset_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<double> z;
  std::size_t k = 0, rows = 0, lineno = 0;
  LabeledDataset out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      return FormatError("dataset line " + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(e.what());
    }
    if (!j.contains("z") || !j.contains("labels")) throw fail("needs fields z and labels");
    const auto zrow = j.at("z").get<std::vector<double>>();
    auto labels = j.at("labels").get<std::vector<int>>();
    if (rows == 0) k = zrow.size();
    if (zrow.size() != k || zrow.empty()) throw fail("inconsistent latent width");
    for (int l : labels) {
      if (l != 1 && l != -1) throw fail("labels must be +1 or -1");
    }
    if (!out.labels.empty() && labels.size() != out.labels.front().size()) throw fail("inconsistent label count");
    z.insert(z.end(), zrow.begin(), zrow.end());
    out.labels.push_back(std::move(labels));
    ++rows;
  }
  if (rows == 0) throw FormatError("dataset is empty");
  out.z = Tensor({rows, k}, std::move(z));
  return out;
}

}  // namespace moedis
