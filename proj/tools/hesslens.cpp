// Command-line front end: training, spectra, traces, layer comparison, delta
// export and dense oracles. All outputs land under --out with a manifest.json.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hesslens/hesslens.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hesslens;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRefused = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw UsageError(what + ": expected a non-negative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw UsageError(what + ": value out of range '" + s + "'");
  }
}

/// --seed, else HESSLENS_SEED, else 0.
std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t value) {
  if (flag->count() > 0) return value;
  if (const char* env = std::getenv("HESSLENS_SEED"); env != nullptr && *env != '\0') {
    return parse_u64(env, "HESSLENS_SEED");
  }
  return 0;
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
  if (!out) throw FormatError("write failed: " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

void write_matrix_csv(const fs::path& p, const Eigen::MatrixXd& m) {
  std::string s;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += (j ? "," : "") + num(m(i, j));
    s += "\n";
  }
  write_text(p, s);
}

fs::path prepare_out(const std::string& out) {
  fs::path p(out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw FormatError("cannot create output directory " + out);
  return p;
}

std::string data_hash(const std::string& text) {
  if (text.rfind("idx:", 0) == 0) {
    std::string joined;
    std::size_t start = 4;
    while (start <= text.size()) {
      const std::size_t end = std::min(text.find(',', start), text.size());
      joined += file_hash(text.substr(start, end - start));
      start = end + 1;
    }
    return hex64(fnv1a64(joined));
  }
  return hex64(fnv1a64(text));
}

struct Manifest {
  json j;
  std::vector<std::string> outputs;

  Manifest(std::string command, json config, std::uint64_t seed) {
    j["command"] = std::move(command);
    j["config"] = std::move(config);
    j["seed"] = seed;
    j["tool_version"] = kVersion;
    j["input_hashes"] = json::object();
  }
  void input(const std::string& name, const std::string& hash) { j["input_hashes"][name] = hash; }
  void output(const std::string& rel) { outputs.push_back(rel); }
  void write(const fs::path& dir) {
    std::sort(outputs.begin(), outputs.end());
    j["outputs"] = outputs;
    write_json(dir / "manifest.json", j);
  }
};

// ---------------------------------------------------------------------------
// Shared inputs of the analysis commands

struct Scope {
  bool full = true;
  bool layers = false;
  std::optional<std::size_t> layer;
};

Scope parse_scope(const std::string& s, bool allow_layers, bool allow_single) {
  if (s == "full") return {true, false, std::nullopt};
  if (allow_layers && s == "layers") return {true, true, std::nullopt};
  if (allow_single && s.rfind("layer:", 0) == 0) return {false, false, parse_u64(s.substr(6), "--scope layer:K")};
  throw UsageError("invalid --scope '" + s + "'");
}

struct AnalysisInputs {
  std::string ckpt_path;
  std::string data;
  std::string model;
  std::size_t probe_budget = data::kDefaultProbeBudget;
};

void add_analysis_flags(CLI::App* cmd, AnalysisInputs& in, bool ckpt_required = true) {
  auto* c = cmd->add_option("--ckpt", in.ckpt_path, "checkpoint file");
  if (ckpt_required) c->required();
  cmd->add_option("--data", in.data, "blobs:C=..,n=..,dim=..,sep=.. or idx:images,labels")->required();
  cmd->add_option("--model", in.model, "expected model spec (checked against the checkpoint)");
  cmd->add_option("--probe-budget", in.probe_budget, "samples in the fixed probe set (0 = all)")->capture_default_str();
}

struct Loaded {
  train::Checkpoint ck;
  nn::BuiltModel model;
  data::Source source;
  Batch probe;

  nn::BoundNetwork network() const { return nn::BoundNetwork(model.network, model.stats, nn::Mode::Eval); }
};

Loaded load(const AnalysisInputs& in, const std::string& ckpt_path, std::uint64_t seed, std::size_t budget,
            Manifest& manifest) {
  auto ck = train::load_checkpoint(ckpt_path);
  if (!in.model.empty()) train::require_compatible(ck, nn::ModelSpec::parse(in.model));
  auto model = ck.model();
  Loaded l{std::move(ck), std::move(model), data::load_source(in.data), {}};
  if (l.source.train.features() != l.model.network.input_size() ||
      l.source.train.classes != l.model.network.num_classes()) {
    throw DimensionError("data (" + std::to_string(l.source.train.features()) + " features, " +
                         std::to_string(l.source.train.classes) + " classes) does not fit checkpoint model '" +
                         l.ck.model_spec + "'");
  }
  l.probe = data::probe_set(l.source.train, budget, seed);
  manifest.input("data", data_hash(in.data));
  manifest.input(fs::path(ckpt_path).filename().string(), file_hash(ckpt_path));
  return l;
}

curvature::CurvatureOperator make_operator(const std::string& kind, const Loaded& l, std::optional<std::size_t> layer) {
  const auto net = l.network();
  auto hess = [&]() {
    return layer ? curvature::layer_hessian_op(net, l.model.params, *layer, l.probe)
                 : curvature::hessian_op(net, l.model.params, l.probe);
  };
  if (kind == "hessian") return hess();
  if (kind == "g") return curvature::gauss_newton_op(net, l.model.params, l.probe, layer);
  if (kind == "h") return curvature::h_residual_op(hess(), curvature::gauss_newton_op(net, l.model.params, l.probe, layer));
  throw UsageError("invalid --operator '" + kind + "' (hessian|g|h)");
}

struct SlqFlags {
  int m = spectral::kDefaultLanczosSteps;
  int k = spectral::kDefaultGridSize;
  double kappa = spectral::kDefaultKappa;
  int probes = spectral::kDefaultProbes;

  void add(CLI::App* cmd) {
    cmd->add_option("--lanczos-m", m, "Lanczos steps per probe")->capture_default_str();
    cmd->add_option("--grid-k", k, "density grid points")->capture_default_str();
    cmd->add_option("--kappa", kappa, "kernel width parameter")->capture_default_str();
    cmd->add_option("--probes", probes, "SLQ probe vectors")->capture_default_str();
  }
  spectral::SlqOptions options(std::uint64_t seed) const {
    spectral::SlqOptions o;
    o.steps = m;
    o.grid_size = k;
    o.kappa = kappa;
    o.probes = probes;
    o.seed = seed;
    return o;
  }
  json to_json() const { return {{"lanczos_m", m}, {"grid_k", k}, {"kappa", kappa}, {"probes", probes}}; }
};

json density_summary(const spectral::SpectralDensity& d) {
  return {{"sigma", d.sigma}, {"a", d.a},         {"b", d.b}, {"probes", d.probes}, {"failed_probes", d.failed_probes},
          {"mass", d.mass()}, {"degenerate", d.degenerate}};
}

std::string layer_file_tag(std::size_t l) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer%02zu", l);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands

struct TrainArgs {
  std::string model, data, out, htr_layers = "all";
  train::TrainConfig cfg;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  bool no_metrics = false, no_layer_lambda = false;
};

int cmd_train(TrainArgs& a) {
  a.cfg.seed = resolve_seed(a.seed_opt, a.seed);
  a.cfg.htr_layers = train::LayerSelection::parse(a.htr_layers);
  a.cfg.curvature_metrics = !a.no_metrics;
  a.cfg.metric_layer_lambda = !a.no_layer_lambda;
  if (a.cfg.htr_gamma > 0.0 && a.cfg.htr_frequency == 0) {
    std::cerr << "warning: --htr-gamma > 0 with --htr-freq 0 never applies the penalty\n";
  }
  const auto spec = nn::ModelSpec::parse(a.model);
  const auto src = data::load_source(a.data);
  const auto out = prepare_out(a.out);
  json config = train::to_json(a.cfg);
  config["model"] = spec.to_string();
  config["data"] = a.data;
  config["out"] = a.out;
  Manifest manifest("train", config, a.cfg.seed);
  manifest.input("data", data_hash(a.data));

  const fs::path ckdir = out / "checkpoints";
  train::TrainHooks hooks;
  hooks.on_checkpoint = [&](const train::Checkpoint& ck) {
    fs::create_directories(ckdir);
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04llu.hlns", static_cast<unsigned long long>(ck.epoch));
    train::save_checkpoint(ck, (ckdir / name).string());
    manifest.output(std::string("checkpoints/") + name);
  };
  hooks.on_epoch = [](const train::EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " train_loss " << num(r.train.loss) << " test_acc " << num(r.test.accuracy)
              << " trace " << num(r.trace_full) << "\n";
  };
  try {
    const auto res = train::train(a.cfg, spec, src.train, src.test ? &*src.test : nullptr, hooks);
    if (res.htr_layers.degenerate && a.cfg.htr_active()) {
      std::cerr << "warning: model has " << res.log.layer_names.size()
                << " layers; the middle band covers every layer\n";
    }
    res.log.write_csv((out / "runlog.csv").string());
    manifest.output("runlog.csv");
    train::save_checkpoint(res.final_checkpoint, (out / "final.hlns").string());
    manifest.output("final.hlns");
    manifest.j["htr_layers"] = res.htr_layers.layers;
    manifest.j["config_hash"] = res.log.config_hash;
    manifest.write(out);
  } catch (const train::DivergenceError& e) {
    e.log().write_csv((out / "runlog.csv").string());
    manifest.output("runlog.csv");
    manifest.j["aborted"] = e.what();
    manifest.write(out);
    throw;
  }
  return 0;
}

struct SpectrumArgs {
  AnalysisInputs in;
  std::string op = "hessian", scope = "full", out;
  SlqFlags slq;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int cmd_spectrum(SpectrumArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  const Scope scope = parse_scope(a.scope, true, true);
  if (a.op != "hessian" && a.op != "g" && a.op != "h") throw UsageError("invalid --operator '" + a.op + "'");
  const auto out = prepare_out(a.out);
  json config{{"ckpt", a.in.ckpt_path}, {"data", a.in.data},   {"operator", a.op}, {"scope", a.scope},
              {"slq", a.slq.to_json()}, {"probe_budget", a.in.probe_budget}, {"out", a.out}};
  Manifest manifest("spectrum", config, seed);
  const Loaded l = load(a.in, a.in.ckpt_path, seed, a.in.probe_budget, manifest);

  std::vector<std::optional<std::size_t>> targets;
  if (scope.full) targets.push_back(std::nullopt);
  if (scope.layers)
    for (std::size_t i = 0; i < l.model.params.num_layers(); ++i) targets.push_back(i);
  if (scope.layer) {
    l.model.params.segment(*scope.layer);
    targets.push_back(scope.layer);
  }
  json index = json::array();
  for (const auto& t : targets) {
    const auto op = make_operator(a.op, l, t);
    const auto d = spectral::slq_density(op, a.slq.options(seed));
    const std::string file = "density_" + a.op + "_" + (t ? layer_file_tag(*t) : std::string("full")) + ".csv";
    spectral::write_density_csv(d, (out / file).string());
    manifest.output(file);
    json e = density_summary(d);
    e["scope"] = t ? "layer" : "full";
    e["layer"] = t ? json(*t) : json(nullptr);
    e["name"] = t ? l.model.params.segment(*t).name : "full";
    e["dimension"] = op.dim();
    e["file"] = file;
    e["lambda_max"] = spectral::lambda_max(op, spectral::kExtremeSteps, seed);
    index.push_back(e);
  }
  write_json(out / "spectrum.json", {{"operator", a.op}, {"model", l.ck.model_spec}, {"densities", index}});
  manifest.output("spectrum.json");
  manifest.write(out);
  return 0;
}

struct TraceArgs {
  AnalysisInputs in;
  std::string ckpt_dir, dist = "gaussian", scope = "full", out;
  int probes = spectral::kDefaultHutchinsonProbes;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int cmd_trace(TraceArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  const Scope scope = parse_scope(a.scope, true, false);
  const auto dist = spectral::parse_distribution(a.dist);
  if (a.in.ckpt_path.empty() == a.ckpt_dir.empty()) throw UsageError("give exactly one of --ckpt and --ckpt-dir");
  std::vector<std::string> paths;
  if (!a.ckpt_dir.empty()) {
    if (!fs::is_directory(a.ckpt_dir)) throw FormatError("not a directory: " + a.ckpt_dir);
    for (const auto& e : fs::directory_iterator(a.ckpt_dir))
      if (e.is_regular_file() && e.path().extension() == ".hlns") paths.push_back(e.path().string());
    if (paths.empty()) throw FormatError("no .hlns checkpoints in " + a.ckpt_dir);
  } else {
    paths.push_back(a.in.ckpt_path);
  }
  const auto out = prepare_out(a.out);
  json config{{"ckpt", a.in.ckpt_path}, {"ckpt_dir", a.ckpt_dir}, {"data", a.in.data}, {"probes", a.probes},
              {"dist", a.dist},         {"scope", a.scope},       {"probe_budget", a.in.probe_budget}, {"out", a.out}};
  Manifest manifest("trace", config, seed);

  struct Row {
    std::uint64_t epoch;
    std::string name;
    std::vector<spectral::TraceEstimate> est;
  };
  std::vector<Row> rows;
  std::vector<std::string> names{"full"};
  for (const auto& p : paths) {
    const Loaded l = load(a.in, p, seed, a.in.probe_budget, manifest);
    Row r{l.ck.epoch, fs::path(p).filename().string(), {}};
    const auto net = l.network();
    r.est.push_back(spectral::hutchinson_trace(curvature::hessian_op(net, l.model.params, l.probe), a.probes, dist, seed));
    if (scope.layers) {
      std::vector<std::string> layer_names{"full"};
      for (std::size_t i = 0; i < l.model.params.num_layers(); ++i) {
        const auto op = curvature::layer_hessian_op(net, l.model.params, i, l.probe);
        r.est.push_back(spectral::hutchinson_trace(op, a.probes, dist, seed));
        layer_names.push_back(l.model.params.segment(i).name);
      }
      if (names.size() > 1 && names != layer_names) throw DimensionError("checkpoints in the directory differ in layout");
      names = layer_names;
    }
    rows.push_back(std::move(r));
  }
  std::sort(rows.begin(), rows.end(),
            [](const Row& x, const Row& y) { return x.epoch != y.epoch ? x.epoch < y.epoch : x.name < y.name; });
  std::string csv = "epoch,checkpoint";
  for (const auto& n : names) csv += ",trace_" + n + ",stderr_" + n;
  csv += ",probes,distribution,seed\n";
  json rows_json = json::array();
  for (const auto& r : rows) {
    csv += std::to_string(r.epoch) + "," + r.name;
    json e{{"epoch", r.epoch}, {"checkpoint", r.name}};
    json scopes = json::object();
    double layer_sum = 0.0, layer_var = 0.0;
    for (std::size_t i = 0; i < r.est.size(); ++i) {
      csv += "," + num(r.est[i].mean) + "," + num(r.est[i].stderr_);
      scopes[names[i]] = spectral::to_json(r.est[i]);
      if (i > 0) layer_sum += r.est[i].mean, layer_var += r.est[i].stderr_ * r.est[i].stderr_;
    }
    csv += "," + std::to_string(a.probes) + "," + a.dist + "," + std::to_string(seed) + "\n";
    e["scopes"] = scopes;
    if (r.est.size() > 1) {
      const double combined = std::sqrt(layer_var + r.est[0].stderr_ * r.est[0].stderr_);
      e["layer_sum"] = layer_sum;
      e["layer_sum_minus_full"] = layer_sum - r.est[0].mean;
      e["combined_stderr"] = combined;
      e["within_3_stderr"] = std::abs(layer_sum - r.est[0].mean) <= 3.0 * combined;
    }
    rows_json.push_back(e);
  }
  write_text(out / "trace.csv", csv);
  write_json(out / "trace.json", {{"rows", rows_json}});
  manifest.output("trace.csv");
  manifest.output("trace.json");
  manifest.write(out);
  return 0;
}

struct CompareArgs {
  AnalysisInputs in;
  std::string metric = "both", out;
  SlqFlags slq;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int cmd_compare(CompareArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  if (a.metric != "wasserstein" && a.metric != "js" && a.metric != "both") {
    throw UsageError("invalid --metric '" + a.metric + "' (wasserstein|js|both)");
  }
  const auto out = prepare_out(a.out);
  json config{{"ckpt", a.in.ckpt_path}, {"data", a.in.data},     {"metric", a.metric},
              {"slq", a.slq.to_json()}, {"probe_budget", a.in.probe_budget}, {"out", a.out}};
  Manifest manifest("compare", config, seed);
  const Loaded l = load(a.in, a.in.ckpt_path, seed, a.in.probe_budget, manifest);
  const auto net = l.network();
  const std::size_t classes = l.model.network.num_classes();
  const auto opt = a.slq.options(seed);

  const auto full = spectral::slq_density(curvature::hessian_op(net, l.model.params, l.probe), opt);
  spectral::write_density_csv(full, (out / "density_full.csv").string());
  manifest.output("density_full.csv");
  json outliers = json::object();
  outliers["full"] = analysis::to_json(analysis::count_outliers(full, classes));
  std::vector<analysis::NamedDensity> layers;
  for (std::size_t i = 0; i < l.model.params.num_layers(); ++i) {
    const auto name = l.model.params.segment(i).name;
    auto d = spectral::slq_density(curvature::layer_hessian_op(net, l.model.params, i, l.probe), opt);
    const std::string file = "density_" + layer_file_tag(i) + ".csv";
    spectral::write_density_csv(d, (out / file).string());
    manifest.output(file);
    outliers[name] = analysis::to_json(analysis::count_outliers(d, classes));
    layers.push_back({name, std::move(d)});
  }
  const auto table = analysis::layer_distance_table(layers, full);
  const bool w = a.metric != "js", j = a.metric != "wasserstein";
  std::string csv = "layer,name";
  if (w) csv += ",wasserstein";
  if (j) csv += ",js";
  csv += "\n";
  for (const auto& r : table.rows) {
    csv += std::to_string(r.layer) + "," + r.name;
    if (w) csv += "," + num(r.wasserstein);
    if (j) csv += "," + num(r.js);
    csv += "\n";
  }
  write_text(out / "distances.csv", csv);
  write_json(out / "outliers.json", outliers);
  const auto band = train::select_layers(layers.size(), train::LayerSelection::parse("middle"));
  auto in_band = [&](std::size_t l) {
    return std::find(band.layers.begin(), band.layers.end(), l) != band.layers.end();
  };
  json summary = analysis::to_json(table);
  summary["middle_band"] = band.layers;
  summary["middle_band_degenerate"] = band.degenerate;
  if (w) summary["argmin_wasserstein_in_middle"] = in_band(table.argmin_wasserstein);
  if (j) summary["argmin_js_in_middle"] = in_band(table.argmin_js);
  summary["metric"] = a.metric;
  write_json(out / "summary.json", summary);
  for (const char* f : {"distances.csv", "outliers.json", "summary.json"}) manifest.output(f);
  manifest.write(out);
  std::cout << "argmin layer (" << (w ? "wasserstein" : "js") << "): "
            << table.rows[w ? table.argmin_wasserstein : table.argmin_js].name << "\n";
  return 0;
}

struct DeltasArgs {
  AnalysisInputs in;
  std::string scope = "full", factor = "class", out;
  std::size_t max_samples = 512;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int cmd_deltas(DeltasArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  const Scope scope = parse_scope(a.scope, false, true);
  if (a.factor != "class" && a.factor != "sqrt") throw UsageError("invalid --factor '" + a.factor + "' (class|sqrt)");
  if (a.max_samples == 0) throw UsageError("--max-samples must be positive");
  const auto out = prepare_out(a.out);
  json config{{"ckpt", a.in.ckpt_path}, {"data", a.in.data}, {"scope", a.scope},
              {"factor", a.factor},     {"max_samples", a.max_samples}, {"out", a.out}};
  Manifest manifest("deltas", config, seed);
  const Loaded l = load(a.in, a.in.ckpt_path, seed, a.max_samples, manifest);
  analysis::DeltaOptions opt;
  opt.layer = scope.layer;
  opt.factor = a.factor == "class" ? analysis::LogitFactor::ClassFactor : analysis::LogitFactor::SymmetricRoot;
  if (scope.layer) l.model.params.segment(*scope.layer);
  const auto ds = analysis::extract_deltas(l.network(), l.model.params, l.probe, opt);
  analysis::write_deltas_csv(ds, (out / "deltas.csv").string());
  const auto pur = analysis::cluster_purity(ds);
  write_json(out / "purity.json", {{"purity", pur.purity},
                                   {"degenerate", pur.degenerate},
                                   {"samples", ds.vectors.rows()},
                                   {"dimension", ds.vectors.cols()},
                                   {"classes", ds.classes},
                                   {"scope", a.scope},
                                   {"factor", a.factor}});
  manifest.output("deltas.csv");
  manifest.output("purity.json");
  manifest.write(out);
  return 0;
}

struct OracleArgs {
  AnalysisInputs in;
  std::string out;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int cmd_oracle(OracleArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  const auto out = prepare_out(a.out);
  json config{{"ckpt", a.in.ckpt_path}, {"data", a.in.data}, {"probe_budget", a.in.probe_budget}, {"out", a.out}};
  Manifest manifest("oracle", config, seed);
  const Loaded l = load(a.in, a.in.ckpt_path, seed, a.in.probe_budget, manifest);
  const std::size_t dim = l.model.params.dimension();
  if (dim > curvature::kMaxDenseDimension) {
    throw RefusalError("oracle: D=" + std::to_string(dim) + " exceeds the dense limit of " +
                       std::to_string(curvature::kMaxDenseDimension));
  }
  const auto net = l.network();
  const auto hess_op = curvature::hessian_op(net, l.model.params, l.probe);
  const auto hess = curvature::materialize_dense(hess_op);
  const auto gn = curvature::materialize_dense(curvature::gauss_newton_op(net, l.model.params, l.probe));
  const Eigen::MatrixXd hs = 0.5 * (hess.matrix + hess.matrix.transpose());
  const Eigen::MatrixXd gs = 0.5 * (gn.matrix + gn.matrix.transpose());
  const Eigen::VectorXd he = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(hs, Eigen::EigenvaluesOnly).eigenvalues();
  const Eigen::VectorXd ge = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gs, Eigen::EigenvaluesOnly).eigenvalues();
  write_matrix_csv(out / "hessian.csv", hess.matrix);
  write_matrix_csv(out / "gauss_newton.csv", gn.matrix);
  std::string ev = "index,hessian,gauss_newton\n";
  for (Eigen::Index i = 0; i < he.size(); ++i) ev += std::to_string(i) + "," + num(he[i]) + "," + num(ge[i]) + "\n";
  write_text(out / "eigenvalues.csv", ev);

  json layers = json::array();
  double layer_sum = 0.0;
  for (std::size_t i = 0; i < l.model.params.num_layers(); ++i) {
    const auto& s = l.model.params.segment(i);
    const auto o = static_cast<Eigen::Index>(s.offset), n = static_cast<Eigen::Index>(s.length);
    const double t = hess.matrix.block(o, o, n, n).trace();
    layer_sum += t;
    layers.push_back({{"layer", i},
                      {"name", s.name},
                      {"dimension", s.length},
                      {"hessian_trace", t},
                      {"gauss_newton_trace", gn.matrix.block(o, o, n, n).trace()}});
  }
  const double lmax_dense = he[he.size() - 1];
  const double lmax_lanczos = spectral::lambda_max(hess_op, spectral::kDefaultLanczosSteps, seed);
  write_json(out / "oracle.json", {{"model", l.ck.model_spec},
                                   {"dimension", dim},
                                   {"probe_samples", l.probe.size()},
                                   {"hessian_trace", hess.matrix.trace()},
                                   {"gauss_newton_trace", gn.matrix.trace()},
                                   {"layer_trace_sum", layer_sum},
                                   {"layers", layers},
                                   {"hessian_asymmetry", hess.asymmetry},
                                   {"gauss_newton_asymmetry", gn.asymmetry},
                                   {"lambda_max_dense", lmax_dense},
                                   {"lambda_max_lanczos", lmax_lanczos},
                                   {"lambda_max_relative_error", std::abs(lmax_lanczos - lmax_dense) /
                                                                     std::max(std::abs(lmax_dense), 1e-300)}});
  for (const char* f : {"hessian.csv", "gauss_newton.csv", "eigenvalues.csv", "oracle.json"}) manifest.output(f);
  manifest.write(out);
  return 0;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const RefusalError& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return kExitRefused;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layerwise Hessian spectra, traces and trace-regularized training"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model, logging curvature per epoch");
  train_cmd->add_option("--model", ta.model, "model spec, e.g. mlp:16-32-32-3")->required();
  train_cmd->add_option("--data", ta.data, "blobs:C=3,n=500,dim=16,sep=6 or idx:images,labels")->required();
  train_cmd->add_option("--epochs", ta.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--lr", ta.cfg.lr)->capture_default_str();
  train_cmd->add_option("--momentum", ta.cfg.momentum)->capture_default_str();
  train_cmd->add_option("--l2", ta.cfg.l2)->capture_default_str();
  train_cmd->add_option("--batch", ta.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--htr-gamma", ta.cfg.htr_gamma, "trace penalty weight")->capture_default_str();
  ta.cfg.htr_frequency = 50;
  train_cmd->add_option("--htr-freq", ta.cfg.htr_frequency, "steps between penalty applications (0 = never)")
      ->capture_default_str();
  train_cmd->add_option("--htr-layers", ta.htr_layers, "all | middle | i,j,k")->capture_default_str();
  train_cmd->add_option("--htr-probes", ta.cfg.htr_probes, "Rademacher probes per penalty step")->capture_default_str();
  train_cmd->add_option("--metric-probes", ta.cfg.metric_trace_probes, "Hutchinson probes for epoch metrics")
      ->capture_default_str();
  train_cmd->add_option("--probe-budget", ta.cfg.metric_probe_budget, "probe-set size for epoch metrics")
      ->capture_default_str();
  train_cmd->add_flag("--no-curvature-metrics", ta.no_metrics, "skip lambda_max/trace logging");
  train_cmd->add_flag("--no-layer-lambda", ta.no_layer_lambda, "skip per-layer lambda_max");
  train_cmd->add_option("--checkpoint-every", ta.cfg.checkpoint_every, "epochs between checkpoints (0 = final only)")
      ->capture_default_str();
  ta.seed_opt = train_cmd->add_option("--seed", ta.seed, "seed (falls back to HESSLENS_SEED)");
  train_cmd->add_option("--out", ta.out)->required();

  SpectrumArgs sa;
  auto* spectrum_cmd = app.add_subcommand("spectrum", "SLQ spectral densities of a checkpoint");
  add_analysis_flags(spectrum_cmd, sa.in);
  spectrum_cmd->add_option("--operator", sa.op, "hessian | g | h")->capture_default_str();
  spectrum_cmd->add_option("--scope", sa.scope, "full | layers | layer:K")->capture_default_str();
  sa.slq.add(spectrum_cmd);
  sa.seed_opt = spectrum_cmd->add_option("--seed", sa.seed);
  spectrum_cmd->add_option("--out", sa.out)->required();

  TraceArgs tra;
  auto* trace_cmd = app.add_subcommand("trace", "Hutchinson trace estimates of one checkpoint or a directory");
  add_analysis_flags(trace_cmd, tra.in, false);
  trace_cmd->add_option("--ckpt-dir", tra.ckpt_dir, "directory of .hlns checkpoints (evolution mode)");
  trace_cmd->add_option("--probes", tra.probes)->capture_default_str();
  trace_cmd->add_option("--dist", tra.dist, "gaussian | rademacher")->capture_default_str();
  trace_cmd->add_option("--scope", tra.scope, "full | layers")->capture_default_str();
  tra.seed_opt = trace_cmd->add_option("--seed", tra.seed);
  trace_cmd->add_option("--out", tra.out)->required();

  CompareArgs ca;
  auto* compare_cmd = app.add_subcommand("compare", "layer-vs-full spectral distances and outlier counts");
  add_analysis_flags(compare_cmd, ca.in);
  compare_cmd->add_option("--metric", ca.metric, "wasserstein | js | both")->capture_default_str();
  ca.slq.add(compare_cmd);
  ca.seed_opt = compare_cmd->add_option("--seed", ca.seed);
  compare_cmd->add_option("--out", ca.out)->required();

  DeltasArgs da;
  auto* deltas_cmd = app.add_subcommand("deltas", "export delta vectors and their class purity");
  add_analysis_flags(deltas_cmd, da.in);
  deltas_cmd->add_option("--scope", da.scope, "full | layer:K")->capture_default_str();
  deltas_cmd->add_option("--max-samples", da.max_samples)->capture_default_str();
  deltas_cmd->add_option("--factor", da.factor, "class | sqrt")->capture_default_str();
  da.seed_opt = deltas_cmd->add_option("--seed", da.seed);
  deltas_cmd->add_option("--out", da.out)->required();

  OracleArgs oa;
  auto* oracle_cmd = app.add_subcommand("oracle", "dense Hessian and Gauss-Newton ground truth (D <= 5000)");
  add_analysis_flags(oracle_cmd, oa.in);
  oa.seed_opt = oracle_cmd->add_option("--seed", oa.seed);
  oracle_cmd->add_option("--out", oa.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  if (*train_cmd) return guarded([&] { return cmd_train(ta); });
  if (*spectrum_cmd) return guarded([&] { return cmd_spectrum(sa); });
  if (*trace_cmd) return guarded([&] { return cmd_trace(tra); });
  if (*compare_cmd) return guarded([&] { return cmd_compare(ca); });
  if (*deltas_cmd) return guarded([&] { return cmd_deltas(da); });
  if (*oracle_cmd) return guarded([&] { return cmd_oracle(oa); });
  return kExitUsage;
}
