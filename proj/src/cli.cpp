#include "moedis/cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "moedis/editor.hpp"
#include "moedis/errors.hpp"
#include "moedis/sbv.hpp"
#include "moedis/trainer.hpp"

#ifndef MOEDIS_VERSION
#define MOEDIS_VERSION "unknown"
#endif

namespace moedis {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

namespace {

// Raised for bad flag combinations that CLI11 cannot express.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string manifest_name(const fs::path& artifact) { return artifact.filename().string() + ".manifest.json"; }

// Sidecar manifest shared by every output of one command. Outputs themselves
// only carry the sidecar's file name, so equal runs give equal bytes.
class Manifest {
 public:
  Manifest(std::string command, json config, std::uint64_t seed) {
    j_ = {{"command", std::move(command)},
          {"config", std::move(config)},
          {"seed", seed},
          {"tool_version", MOEDIS_VERSION},
          {"inputs", json::object()},
          {"outputs", json::object()},
          {"started_utc", utc_now()}};
  }
  void input(const fs::path& p) { j_["inputs"][p.string()] = sha256_hex(read_file(p)); }
  void output(const fs::path& p) {
    j_["outputs"][p.string()] = sha256_hex(read_file(p));
    outputs_.push_back(p);
  }
  void finish() {
    j_["finished_utc"] = utc_now();
    for (const auto& p : outputs_) write_file(p.parent_path() / manifest_name(p), j_.dump(2) + "\n");
  }

 private:
  json j_;
  std::vector<fs::path> outputs_;
};

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

LabeledDataset load_dataset(const fs::path& p, std::size_t limit) {
  auto data = dataset_from_jsonl(read_file(p));
  if (limit && limit < data.size()) {
    const auto k = data.z.cols();
    std::vector<double> z(data.z.data().begin(), data.z.data().begin() + std::ptrdiff_t(limit * k));
    data.z = Tensor({limit, k}, std::move(z));
    data.labels.resize(limit);
  }
  return data;
}

std::vector<double> resolve_xi(const std::string& spec, const GeneratorModel& g, const Tensor& b, const Tensor& z) {
  if (spec == "auto") return calibrate_xi(g, b, z);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(spec, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != spec.size() || !std::isfinite(v)) throw UsageError("--xi expects 'auto' or a number, got '" + spec + "'");
  return std::vector<double>(b.rows(), v);
}

void check_compatible(const TrainConfig& cfg, const GeneratorModel& g, const BoundarySet& b) {
  if (g.latent_dim() != cfg.mdn.latent_dim) {
    throw ConfigError("generator latent size " + std::to_string(g.latent_dim()) + " differs from config K " +
                      std::to_string(cfg.mdn.latent_dim));
  }
  if (b.size() != cfg.mdn.n || b.b.cols() != cfg.mdn.latent_dim) {
    throw ConfigError("SBV set is " + shape_string(b.b.shape()) + " but the config expects n=" +
                      std::to_string(cfg.mdn.n) + ", K=" + std::to_string(cfg.mdn.latent_dim));
  }
}

struct TrainOverrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<double> learning_rate;

  void add_to(CLI::App* sub) {
    sub->add_option("--config", config, "JSON training config (fields mirror TrainConfig)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Seed for MDN init and the latent stream (overrides config)");
    sub->add_option("--steps", steps, "Number of updates (overrides config)");
    sub->add_option("--learning-rate", learning_rate, "Adam learning rate (overrides config)")
        ->check(CLI::PositiveNumber);
  }
  TrainConfig resolve(TrainConfig base) const {
    if (!config.empty()) base = json::parse(read_file(config)).get<TrainConfig>();
    if (seed) base.seed = *seed;
    if (steps) base.steps = *steps;
    if (learning_rate) base.learning_rate = *learning_rate;
    base.validate();
    return base;
  }
};

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  std::string kind = "linear";
  std::size_t k = 16, f = 64, n = 4, hidden = 32, count = 20000;
  std::uint64_t seed = 0;
  std::string prefix;
};

void cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  GeneratorConfig cfg;
  cfg.kind = parse_generator_kind(a.kind);
  cfg.latent_dim = a.k;
  cfg.feature_dim = a.f;
  cfg.n_attributes = a.n;
  cfg.hidden_dim = a.hidden;
  cfg.seed = a.seed;
  const GeneratorModel g(cfg);
  const auto data = label_latents(g, sample_latents(a.count, a.k, a.seed + 1));

  const fs::path gen_path = a.prefix + ".generator.ckpt";
  const fs::path data_path = a.prefix + ".dataset.jsonl";
  Checkpoint ckpt;
  g.store(ckpt);
  ckpt.meta["manifest"] = manifest_name(gen_path);
  save_checkpoint(ckpt, gen_path);
  write_file(data_path, dataset_to_jsonl(data));

  Manifest m("gen-data",
             {{"kind", a.kind}, {"k", a.k}, {"f", a.f}, {"n", a.n}, {"hidden", a.hidden}, {"count", a.count}},
             a.seed);
  m.output(gen_path);
  m.output(data_path);
  m.finish();
  out << "wrote " << gen_path.string() << " and " << data.size() << " records to " << data_path.string() << "\n";
}

// ---- fit-sbv ----------------------------------------------------------------

struct FitArgs {
  std::string dataset, out;
  FitConfig fit;
};

void cmd_fit_sbv(const FitArgs& a, std::ostream& out) {
  const auto data = load_dataset(a.dataset, 0);
  const auto set = fit_boundaries(data, a.fit);
  Checkpoint ckpt;
  set.store(ckpt);
  ckpt.meta["manifest"] = manifest_name(a.out);
  save_checkpoint(ckpt, a.out);

  Manifest m("fit-sbv",
             {{"lambda", a.fit.lambda},
              {"holdout_frac", a.fit.holdout_frac},
              {"min_samples", a.fit.min_samples},
              {"min_accuracy", a.fit.min_accuracy}},
             0);
  m.input(a.dataset);
  m.output(a.out);
  m.finish();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& d = set.diagnostics[i];
    out << "attribute " << i << ": holdout accuracy " << d.holdout_accuracy << ", " << d.iterations
        << " iterations" << (d.converged ? "" : " (not converged)") << "\n";
  }
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  TrainOverrides overrides;
  std::string generator, sbv, out, log, resume;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto g = GeneratorModel::load(load_checkpoint(a.generator));
  const auto b = BoundarySet::load(load_checkpoint(a.sbv));

  TrainConfig cfg;
  TrainState state;
  if (!a.resume.empty()) {
    TrainConfig stored;
    state = load_train_state(load_checkpoint(a.resume), &stored);
    cfg = a.overrides.resolve(stored);
  } else {
    cfg = a.overrides.resolve(TrainConfig{});
    state = init_train_state(cfg);
  }
  check_compatible(cfg, g, b);

  std::ofstream log;
  if (!a.log.empty()) {
    if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
    log.open(a.log, a.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot open log file " + a.log);
  }

  auto save = [&](const TrainState& s) {
    auto ckpt = store_train_state(s, cfg);
    ckpt.meta["manifest"] = manifest_name(a.out);
    save_checkpoint(ckpt, a.out);
  };
  TrainHooks hooks;
  hooks.on_record = [&](const TrainRecord& r) {
    if (log) log << json(r).dump() << "\n" << std::flush;
  };
  hooks.on_checkpoint = save;
  hooks.failure_checkpoint = a.out;

  Manifest m(a.resume.empty() ? "train" : "train --resume", cfg, cfg.seed);
  m.input(a.generator);
  m.input(a.sbv);
  if (!a.resume.empty()) m.input(a.resume);
  const auto start = state.step;
  try {
    train_until_done(state, cfg, g, b.b, hooks);
  } catch (...) {
    log.close();
    if (!a.log.empty()) m.output(a.log);
    m.output(a.out);
    m.finish();
    throw;
  }
  if (state.step == start) save(state);
  log.close();
  m.output(a.out);
  if (!a.log.empty()) m.output(a.log);
  m.finish();
  out << "trained steps " << start << ".." << state.step << ", loss ema " << state.loss_ema << ", wrote "
      << a.out << "\n";
}

// ---- edit -------------------------------------------------------------------

struct EditArgs {
  std::string model, generator, dataset, z_file, out;
  std::optional<std::size_t> z_index;
  std::size_t attr = 0;
  double xi = 0.0;
};

void cmd_edit(const EditArgs& a, std::ostream& out) {
  const auto mdn = load_train_state(load_checkpoint(a.model)).mdn;
  const auto g = GeneratorModel::load(load_checkpoint(a.generator));
  Tensor z;
  if (a.z_index) {
    if (a.dataset.empty()) throw UsageError("--z-index needs --dataset");
    const auto data = load_dataset(a.dataset, 0);
    if (*a.z_index >= data.size()) throw ArgumentError("--z-index beyond the dataset size");
    z = data.z.row_at(*a.z_index);
  } else {
    z = Tensor::row(json::parse(read_file(a.z_file)).get<std::vector<double>>());
  }
  const auto w = semantic_vectors(mdn, z).w;
  const auto edited = edit(g, w, {z, a.attr, a.xi});
  const json result = {{"attribute", a.attr},
                       {"xi", a.xi},
                       {"z", z.vector()},
                       {"w", w.row_at(a.attr).vector()},
                       {"original", g.generate(z).vector()},
                       {"edited", edited.vector()}};
  if (a.out.empty()) {
    out << result.dump() << "\n";
    return;
  }
  json with_manifest = result;
  with_manifest["manifest"] = manifest_name(a.out);
  write_json(a.out, with_manifest);
  Manifest m("edit", {{"attr", a.attr}, {"xi", a.xi}, {"z_index", a.z_index ? json(*a.z_index) : json()}}, 0);
  m.input(a.model);
  m.input(a.generator);
  if (!a.dataset.empty()) m.input(a.dataset);
  if (!a.z_file.empty()) m.input(a.z_file);
  m.output(a.out);
  m.finish();
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string model, generator, sbv, dataset, xi = "auto", report;
  std::size_t limit = 0;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto mdn = load_train_state(load_checkpoint(a.model)).mdn;
  const auto g = GeneratorModel::load(load_checkpoint(a.generator));
  const auto b = BoundarySet::load(load_checkpoint(a.sbv));
  const auto data = load_dataset(a.dataset, a.limit);
  const auto xi = resolve_xi(a.xi, g, b.b, data.z);
  const auto rep = evaluate(g, mdn_directions(mdn), b.b, data.z, xi);
  json j = rep;
  j["dataset_size"] = data.size();
  j["manifest"] = manifest_name(a.report);
  write_json(a.report, j);
  Manifest m("eval", {{"xi", a.xi}, {"limit", a.limit}}, 0);
  for (const auto& p : {a.model, a.generator, a.sbv, a.dataset}) m.input(p);
  m.output(a.report);
  m.finish();
  out << "AA mean " << rep.aa_mean << ", IDS mean " << rep.ids_mean << ", C diag mean " << rep.c_diag_mean
      << ", C offdiag abs mean " << rep.c_offdiag_absmean << "\n";
}

// ---- ablate -----------------------------------------------------------------

struct AblateArgs {
  TrainOverrides overrides;
  std::string generator, sbv, dataset, report, csv, xi = "auto";
  std::vector<std::string> variants{"full", "no-ga", "no-ppa"};
  std::vector<double> r_values{0.1, 0.3, 0.5, 1.0, 3.0};
  std::size_t limit = 0;
};

void cmd_ablate(const AblateArgs& a, std::ostream& out) {
  if (a.variants.empty() || a.r_values.empty()) throw UsageError("ablation grid is empty");
  const auto base = a.overrides.resolve(TrainConfig{});
  const auto g = GeneratorModel::load(load_checkpoint(a.generator));
  const auto b = BoundarySet::load(load_checkpoint(a.sbv));
  check_compatible(base, g, b);
  const auto data = load_dataset(a.dataset, a.limit);
  const auto xi = resolve_xi(a.xi, g, b.b, data.z);

  json rows = json::array();
  std::ostringstream csv;
  csv << "variant,r_temp,AA_mean,IDS_mean,C_diag_mean,C_offdiag_absmean,w_norm_mean\n";
  for (const auto& variant : a.variants) {
    for (double r : a.r_values) {
      auto cfg = base;
      cfg.ppa.r_temp = r;
      cfg.use_ga = variant != "no-ga";
      cfg.use_ppa = variant != "no-ppa";
      const auto state = train(cfg, g, b.b);
      const auto rep = evaluate(g, mdn_directions(state.mdn), b.b, data.z, xi);
      json row = rep;
      row["variant"] = variant;
      row["r_temp"] = r;
      rows.push_back(row);
      csv << variant << "," << r << "," << rep.aa_mean << "," << rep.ids_mean << "," << rep.c_diag_mean << ","
          << rep.c_offdiag_absmean << "," << rep.w_norm_mean << "\n";
      out << variant << " r=" << r << ": AA " << rep.aa_mean << ", IDS " << rep.ids_mean << "\n";
    }
  }
  write_json(a.report, {{"config", base}, {"xi", xi}, {"rows", rows}, {"manifest", manifest_name(a.report)}});
  Manifest m("ablate", {{"config", base}, {"variants", a.variants}, {"r_values", a.r_values}, {"xi", a.xi}},
             base.seed);
  for (const auto& p : {a.generator, a.sbv, a.dataset}) m.input(p);
  m.output(a.report);
  if (!a.csv.empty()) {
    write_file(a.csv, csv.str());
    m.output(a.csv);
  }
  m.finish();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Label-free semantic direction discovery with a mixture of experts", "moedis"};
  app.set_version_flag("--version", MOEDIS_VERSION);
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Build a synthetic generator and a labeled latent dataset");
  gen_cmd->add_option("--kind", gen.kind, "Generator kind")->check(CLI::IsMember({"linear", "mlp"}));
  gen_cmd->add_option("--k", gen.k, "Latent size K")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--f", gen.f, "Feature size F")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--n", gen.n, "Number of attributes")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--hidden", gen.hidden, "Hidden width of the mlp generator")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--count", gen.count, "Number of latents to sample")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Seed for the generator and the latents");
  gen_cmd->add_option("--out-prefix", gen.prefix, "Writes <prefix>.generator.ckpt and <prefix>.dataset.jsonl")
      ->required();

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-sbv", "Fit semantic boundary vectors to a labeled dataset");
  fit_cmd->add_option("--dataset", fit.dataset, "Labeled JSON-lines dataset")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--out", fit.out, "Output checkpoint (sbv.B, sbv.intercepts)")->required();
  fit_cmd->add_option("--lambda", fit.fit.lambda, "L2 penalty")->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--holdout", fit.fit.holdout_frac, "Held-out fraction (last samples)")
      ->check(CLI::Range(0.0, 0.99));
  fit_cmd->add_option("--min-samples", fit.fit.min_samples, "Minimum number of samples");
  fit_cmd->add_option("--min-accuracy", fit.fit.min_accuracy, "Held-out accuracy floor")->check(CLI::Range(0.0, 1.0));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the MDN against a generator and its boundary vectors");
  tr.overrides.add_to(train_cmd);
  train_cmd->add_option("--generator", tr.generator, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--sbv", tr.sbv, "SBV checkpoint")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output training checkpoint")->required();
  train_cmd->add_option("--log", tr.log, "JSON-lines training log");
  train_cmd->add_option("--resume", tr.resume, "Continue from a training checkpoint")->check(CLI::ExistingFile);

  EditArgs ed;
  auto* edit_cmd = app.add_subcommand("edit", "Edit one latent along a learned semantic vector");
  edit_cmd->add_option("--model", ed.model, "Training checkpoint")->required()->check(CLI::ExistingFile);
  edit_cmd->add_option("--generator", ed.generator, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  edit_cmd->add_option("--dataset", ed.dataset, "Dataset for --z-index")->check(CLI::ExistingFile);
  auto* zi = edit_cmd->add_option("--z-index", ed.z_index, "Row of --dataset to edit");
  auto* zf = edit_cmd->add_option("--z-file", ed.z_file, "JSON array holding the latent")->check(CLI::ExistingFile);
  zi->excludes(zf);
  edit_cmd->add_option("--attr", ed.attr, "Attribute index")->required();
  edit_cmd->add_option("--xi", ed.xi, "Step size")->required();
  edit_cmd->add_option("--out", ed.out, "Write the result here instead of stdout");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Report AA, IDS and cross-alignment for a trained model");
  eval_cmd->add_option("--model", ev.model, "Training checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--generator", ev.generator, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--sbv", ev.sbv, "SBV checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", ev.dataset, "Evaluation latents")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--xi", ev.xi, "'auto' (calibrated per attribute) or a fixed step");
  eval_cmd->add_option("--report", ev.report, "Output JSON report")->required();
  eval_cmd->add_option("--limit", ev.limit, "Use only the first N latents (0: all)");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate the loss/temperature ablation grid");
  ab.overrides.add_to(ablate_cmd);
  ablate_cmd->add_option("--generator", ab.generator, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--sbv", ab.sbv, "SBV checkpoint")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--dataset", ab.dataset, "Evaluation latents")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--variants", ab.variants, "Subset of full,no-ga,no-ppa")
      ->delimiter(',')
      ->check(CLI::IsMember({"full", "no-ga", "no-ppa"}));
  ablate_cmd->add_option("--r-values", ab.r_values, "Temperatures to sweep")->delimiter(',')->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--xi", ab.xi, "'auto' or a fixed step");
  ablate_cmd->add_option("--report", ab.report, "Output JSON table")->required();
  ablate_cmd->add_option("--csv", ab.csv, "Also write the table as CSV");
  ablate_cmd->add_option("--limit", ab.limit, "Use only the first N evaluation latents (0: all)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) cmd_gen_data(gen, out);
    if (fit_cmd->parsed()) cmd_fit_sbv(fit, out);
    if (train_cmd->parsed()) cmd_train(tr, out);
    if (edit_cmd->parsed()) {
      if (!ed.z_index && ed.z_file.empty()) throw UsageError("edit needs --z-index or --z-file");
      cmd_edit(ed, out);
    }
    if (eval_cmd->parsed()) cmd_eval(ev, out);
    if (ablate_cmd->parsed()) cmd_ablate(ab, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace moedis
