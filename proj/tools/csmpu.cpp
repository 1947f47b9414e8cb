// csmpu command-line driver.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>


#include "csmpu/csmpu.hpp"

namespace fs = std::filesystem;
using namespace csmpu;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fills options that were not given on the command line from a flat JSON
/// object whose keys are long option names ("pi-k": 0.3, "l1": [0, 0.1]).
void apply_config(CLI::App* sub, const std::string& path) {
  const Json j = read_json(path);
  if (!j.is_object()) throw UsageError(path + ": config must be a JSON object");
  auto text = [&](const std::string& key, const Json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw UsageError(path + ": unsupported value for '" + key + "'");
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    CLI::Option* opt = sub->get_option_no_throw("--" + it.key());
    if (opt == nullptr || it.key() == "config") {
      throw UsageError(path + ": unknown option '" + it.key() + "' for " + sub->get_name());
    }
    if (opt->count() > 0) continue;
    std::vector<std::string> values;
    if (it->is_array()) {
      for (const auto& v : *it) values.push_back(text(it.key(), v));
    } else {
      values.push_back(text(it.key(), *it));
    }
    opt->add_result(values);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError(path + ": " + it.key() + ": " + e.what());
    }
  }
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("CSMPU_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("CSMPU_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Dataset options shared by train, eval, sweep and gen-data

struct DatasetOptions {
  std::string kind = "synthetic";
  std::size_t k = 4;
  double pi_k = 0.5;
  std::size_t n_labeled = 200;
  std::size_t n_unlabeled = 4000;
  std::size_t n_test = 2000;
  double separation = 3.0;
  std::string csv_path;
  std::string label_column = "label";
  std::string idx_images;
  std::string idx_labels;
  double labeled_fraction = 0.5;
  double test_fraction = 0.2;

  void add(CLI::App* app) {
    app->add_option("--dataset", kind, "synthetic, csv or idx")
        ->check(CLI::IsMember({"synthetic", "csv", "idx"}))
        ->capture_default_str();
    app->add_option("--k", k, "number of classes including the meta-class")->capture_default_str();
    app->add_option("--pi-k", pi_k, "meta-class prior in the unlabeled pool")->capture_default_str();
    app->add_option("--n-labeled", n_labeled, "synthetic: labeled rows per observed class")
        ->capture_default_str();
    app->add_option("--n-unlabeled", n_unlabeled, "synthetic: pool size")->capture_default_str();
    app->add_option("--n-test", n_test, "synthetic: labeled test rows")->capture_default_str();
    app->add_option("--separation", separation, "synthetic: polygon circumradius")->capture_default_str();
    app->add_option("--csv", csv_path, "csv: input file")->check(CLI::ExistingFile);
    app->add_option("--label-column", label_column, "csv: label column name or index")
        ->capture_default_str();
    app->add_option("--idx-images", idx_images, "idx: image file")->check(CLI::ExistingFile);
    app->add_option("--idx-labels", idx_labels, "idx: label file")->check(CLI::ExistingFile);
    app->add_option("--labeled-fraction", labeled_fraction, "share of each observed class kept labeled")
        ->capture_default_str();
    app->add_option("--test-fraction", test_fraction, "csv/idx: held-out test share")
        ->capture_default_str();
  }

  void validate() const {
    if (k < 2) throw UsageError("--k must be at least 2");
    if (!(pi_k > 0.0 && pi_k < 1.0)) throw UsageError("--pi-k must lie in (0,1)");
    if (!(separation > 0.0)) throw UsageError("--separation must be positive");
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
      throw UsageError("--labeled-fraction must lie in (0,1]");
    }
    if (kind == "csv" && csv_path.empty()) throw UsageError("--dataset csv needs --csv");
    if (kind == "idx" && (idx_images.empty() || idx_labels.empty())) {
      throw UsageError("--dataset idx needs --idx-images and --idx-labels");
    }
  }
};

struct Prepared {
  MpuDataset data;
  LabeledSet test;
  std::string source;
};

Prepared prepare(const DatasetOptions& opt, std::uint64_t seed) {
  opt.validate();
  Prepared out;
  if (opt.kind == "synthetic") {
    SyntheticFamily fam{opt.k, uniform_observed_priors(opt.k, opt.pi_k), opt.separation, 1.0};
    std::mt19937_64 rng(seed);
    out.data = gen_synthetic(fam, opt.n_labeled, opt.n_unlabeled, rng);
    out.test = sample_mixture(fam, opt.n_test, rng);
    out.source = "synthetic";
    return out;
  }
  const LabeledData raw = opt.kind == "csv" ? load_csv(opt.csv_path, opt.label_column)
                                            : load_idx(opt.idx_images, opt.idx_labels);
  out.source = opt.kind == "csv" ? opt.csv_path : opt.idx_images;
  auto [train_part, test_part] = train_test_split(raw, opt.test_fraction, seed);
  out.data = mpu_split(train_part, SplitParams{opt.k, opt.pi_k, opt.labeled_fraction, seed});
  out.test = ClassMapping(train_part.labels, opt.k).apply(test_part);
  const auto stats = minmax_fit(training_rows(out.data.sample));
  out.data.sample = minmax_apply(stats, out.data.sample);
  out.test.x = minmax_apply(stats, out.test.x);
  return out;
}

// ---------------------------------------------------------------------------
// Objective and optimizer options

struct ModelOptions {
  std::string estimator = "csmpu";
  std::string correction = "abs";
  std::string loss = "sigmoid_prob";
  double gamma = 1.0;
  bool sym = false;
  std::size_t epochs = 100;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  bool lr_sweep = false;
  bool linear = false;

  void add(CLI::App* app) {
    app->add_option("--estimator", estimator, "csmpu, ure_ovr, biased_super or area")
        ->capture_default_str();
    app->add_option("--correction", correction, "none, nn or abs")->capture_default_str();
    app->add_option("--loss", loss, "surrogate family")->capture_default_str();
    app->add_option("--gamma", gamma, "surrogate sharpness")->capture_default_str();
    app->add_flag("--sym", sym, "use the symmetrized, clipped surrogate");
    app->add_option("--epochs", epochs)->capture_default_str();
    app->add_option("--batch-size", batch_size)->capture_default_str();
    app->add_option("--lr", learning_rate, "Adam learning rate")->capture_default_str();
    app->add_flag("--lr-sweep", lr_sweep, "pick the learning rate on a 10% validation split");
    app->add_flag("--linear", linear, "linear scorer instead of the default MLP");
  }

  RiskConfig risk(const MpuSample& s) const {
    RiskConfig r;
    r.k = s.k();
    r.priors = s.priors;
    const auto e = parse_estimator(estimator);
    if (!e) throw UsageError("unknown estimator '" + estimator + "'");
    const auto c = parse_correction(correction);
    if (!c) throw UsageError("unknown correction '" + correction + "'");
    const auto f = parse_loss_family(loss);
    if (!f) throw UsageError("unknown loss '" + loss + "'");
    r.estimator = *e;
    r.correction = *c;
    r.surrogate.family = *f;
    r.surrogate.gamma = gamma;
    r.surrogate.sym_clip = sym ? SymClip::sym : SymClip::raw;
    try {
      r.validate();
    } catch (const std::invalid_argument& ex) {
      throw UsageError(ex.what());
    }
    return r;
  }

  TrainConfig train_config(const MpuSample& s, std::uint64_t seed) const {
    TrainConfig cfg;
    cfg.risk = risk(s);
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.learning_rate = learning_rate;
    cfg.seed = seed;
    try {
      cfg.validate();
    } catch (const std::invalid_argument& ex) {
      throw UsageError(ex.what());
    }
    return cfg;
  }

  Architecture architecture(std::size_t d, std::size_t k) const {
    return linear ? linear_architecture(d, k) : default_mlp(d, k);
  }
};

std::string out_file(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  return (fs::path(dir) / name).string();
}

Json metrics_json(const Metrics& m, const RiskConfig& r) {
  Json j = to_json(m);
  j["estimator"] = to_string(r.estimator);
  j["correction"] = to_string(r.correction);
  j["loss"] = to_string(r.surrogate.family);
  return j;
}

/// Score margins z_i = f_i(x) of every labeled and pool row.
MarginData scorer_margins(const Scorer& s, const MpuSample& sample) {
  const std::size_t m = sample.k() - 1;
  auto cut = [&](const Matrix& x) {
    const Matrix scores = s.infer(x);
    Matrix z(scores.rows(), m);
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      for (std::size_t j = 0; j < m; ++j) z(r, j) = scores(r, j);
    }
    return z;
  };
  MarginData out;
  out.pool = cut(sample.pool);
  for (const auto& set : sample.observed) out.positives.push_back(cut(set));
  return out;
}

TrainResult fit(const ModelOptions& mo, const Prepared& p, std::uint64_t seed, TrainConfig& cfg) {
  cfg = mo.train_config(p.data.sample, seed);
  const auto arch = mo.architecture(p.data.feature_dim(), p.data.k());
  if (mo.lr_sweep) {
    const auto choice = select_learning_rate(cfg, p.data, arch);
    cfg.learning_rate = choice.best_rate;
    std::cerr << "selected learning rate " << fmt6(choice.best_rate) << '\n';
  }
  return train(cfg, p.data.sample, init_scorer(arch, seed), &p.test);
}

// ---------------------------------------------------------------------------
// Subcommands

int run_check_losses(const std::vector<double>& grid, std::size_t points,
                     const std::vector<std::string>& only, const std::string& out_dir) {
  if (grid.size() != 2 || !(grid[1] > grid[0])) throw UsageError("--grid needs LO HI with LO < HI");
  if (points < 2) throw UsageError("--points must be at least 2");
  for (const auto& name : only) {
    if (!parse_loss_family(name)) throw UsageError("unknown loss '" + name + "'");
  }
  auto rows = reproduce_loss_table(grid[0], grid[1], points);
  if (!only.empty()) {
    std::erase_if(rows, [&](const LossTableRow& r) {
      return std::find(only.begin(), only.end(), to_string(r.spec.family)) == only.end();
    });
  }
  const std::string csv = loss_table_csv(rows);
  write_text(out_file(out_dir, "loss_table.csv"), csv);
  std::cout << csv;
  return 0;
}

int run_train(const DatasetOptions& dso, const ModelOptions& mo, std::uint64_t seed,
              const std::string& out_dir) {
  const auto p = prepare(dso, seed);
  TrainConfig cfg;
  const auto res = fit(mo, p, seed, cfg);
  const auto metrics = evaluate(res.scorer, p.test);
  write_json(out_file(out_dir, "checkpoint.json"), checkpoint_json(res.scorer));
  write_text(out_file(out_dir, "history.csv"), history_csv(res.history));
  write_json(out_file(out_dir, "metrics.json"), metrics_json(metrics, cfg.risk));
  write_json(out_file(out_dir, "manifest.json"), dataset_manifest(p.source, p.data, dso.pi_k, seed));
  const auto heat = margin_support_heatmaps(res.scorer, p.test);
  write_text(out_file(out_dir, "heatmap_margin.csv"), heatmap_margin_csv(heat));
  write_text(out_file(out_dir, "heatmap_support.csv"), heatmap_support_csv(heat));
  write_text(out_file(out_dir, "margins.csv"), margins_csv(scorer_margins(res.scorer, p.data.sample)));
  std::cout << "accuracy " << fmt6(metrics.accuracy) << " macro_f1 " << fmt6(metrics.macro_f1) << '\n';
  return 0;
}

int run_eval(const DatasetOptions& dso, const std::string& checkpoint, std::uint64_t seed,
             const std::string& out_dir) {
  const auto p = prepare(dso, seed);
  Scorer s = scorer_from_json(read_json(checkpoint));
  if (s.input_dim() != p.test.x.cols() || s.output_dim() != dso.k) {
    throw UsageError("checkpoint shape does not match the dataset");
  }
  const auto metrics = evaluate(s, p.test);
  write_json(out_file(out_dir, "eval_metrics.json"), to_json(metrics));
  const auto heat = margin_support_heatmaps(s, p.test);
  write_text(out_file(out_dir, "heatmap_margin.csv"), heatmap_margin_csv(heat));
  write_text(out_file(out_dir, "heatmap_support.csv"), heatmap_support_csv(heat));
  std::cout << "accuracy " << fmt6(metrics.accuracy) << " macro_f1 " << fmt6(metrics.macro_f1) << '\n';
  return 0;
}

struct PriorOptions {
  std::string scores;
  std::vector<double> synthetic;
  std::size_t n_pool = 10000;
  std::size_t n_pos = 10000;
  std::size_t bootstrap = 0;
  double delta = 0.05;
  PriorConfig cfg;
  std::string out = "prior.json";
};

int run_estimate_prior(const PriorOptions& po, std::uint64_t seed) {
  if (po.scores.empty() == po.synthetic.empty()) {
    throw UsageError("give exactly one of --scores or --synthetic");
  }
  if (po.bootstrap == 1) throw UsageError("--bootstrap needs at least 2 replicates");
  if (!(po.delta > 0.0 && po.delta < 1.0)) throw UsageError("--delta must lie in (0,1)");
  if (po.cfg.alphas.empty()) throw UsageError("--alphas must not be empty");
  MarginData data;
  if (!po.scores.empty()) {
    data = read_margins_csv(po.scores);
  } else {
    std::mt19937_64 rng(seed);
    data = sample_margins(MarginMixture{po.synthetic}, po.n_pool, po.n_pos, rng);
  }
  const auto est = po.bootstrap >= 2 ? bootstrap_priors(data, po.bootstrap, po.delta, seed, po.cfg)
                                     : estimate_priors(data, po.cfg);
  const auto j = to_json(est, po.cfg);
  if (const auto parent = fs::path(po.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_json(po.out, j);
  std::cout << j.dump() << '\n';
  return 0;
}

int run_sweep(const DatasetOptions& dso, const ModelOptions& mo, std::uint64_t seed,
              const std::string& checkpoint, const std::string& scheme_name,
              const std::vector<double>& l1, const std::string& mode, const std::string& out_dir) {
  const auto scheme = parse_sweep_scheme(scheme_name);
  if (!scheme) throw UsageError("unknown scheme '" + scheme_name + "'");
  for (double v : l1) {
    if (!(v >= 0.0)) throw UsageError("--l1 magnitudes must be non-negative");
  }
  const auto p = prepare(dso, seed);
  TrainConfig cfg = mo.train_config(p.data.sample, seed);
  Scorer scorer;
  if (!checkpoint.empty()) {
    scorer = scorer_from_json(read_json(checkpoint));
  } else {
    scorer = fit(mo, p, seed, cfg).scorer;
  }
  SweepOptions opt;
  opt.mode = mode == "retrain" ? SweepMode::retrain : SweepMode::reevaluate;
  opt.retrain = cfg;
  const auto rep = misspecification_sweep(p.data.sample, scorer, cfg.risk, p.test, *scheme, l1, opt);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  const std::string csv = sweep_csv(rep);
  write_text(out_file(out_dir, "sweep.csv"), csv);
  std::cout << csv;
  return 0;
}

int run_gen_data(const DatasetOptions& dso, std::uint64_t seed, const std::string& out_dir) {
  const auto p = prepare(dso, seed);
  write_text(out_file(out_dir, "sample.csv"), sample_csv(p.data));
  std::ostringstream test;
  test.precision(17);
  for (std::size_t j = 0; j < p.test.x.cols(); ++j) test << 'x' << j + 1 << ',';
  test << "label\n";
  for (std::size_t r = 0; r < p.test.x.rows(); ++r) {
    for (double v : p.test.x.row(r)) test << v << ',';
    test << p.test.y[r] << '\n';
  }
  write_text(out_file(out_dir, "test.csv"), test.str());
  Json manifest = dataset_manifest(p.source, p.data, dso.pi_k, seed);
  manifest["priors"] = p.data.sample.priors;
  write_json(out_file(out_dir, "manifest.json"), manifest);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cost-sensitive multi-class PU learning toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  auto attach_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON file with option values; flags on the command line win")
        ->check(CLI::ExistingFile);
  };

  std::uint64_t seed = 0;
  bool seed_given = false;
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "master seed (falls back to CSMPU_SEED, then 0)");
  };

  auto* check = app.add_subcommand("check-losses", "constant-sum diagnostics for the surrogate table");
  attach_config(check);
  std::vector<double> grid{-10.0, 10.0};
  std::size_t points = 2001;
  std::vector<std::string> only;
  std::string out_dir = ".";
  check->add_option("--grid", grid, "LO HI")->expected(2)->capture_default_str();
  check->add_option("--points", points)->capture_default_str();
  check->add_option("--loss", only, "restrict to these families");
  check->add_option("--out-dir", out_dir)->capture_default_str();

  DatasetOptions dso;
  ModelOptions mo;
  auto* train_cmd = app.add_subcommand("train", "train a scorer and write checkpoint, history, metrics");
  attach_config(train_cmd);
  dso.add(train_cmd);
  mo.add(train_cmd);
  add_seed(train_cmd);
  train_cmd->add_option("--out-dir", out_dir)->capture_default_str();

  std::string checkpoint;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
  attach_config(eval_cmd);
  dso.add(eval_cmd);
  add_seed(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out-dir", out_dir)->capture_default_str();

  PriorOptions po;
  auto* prior_cmd = app.add_subcommand("estimate-prior", "estimate observed-class priors from margins");
  attach_config(prior_cmd);
  add_seed(prior_cmd);
  prior_cmd->add_option("--scores", po.scores, "margins CSV (set,z1..z_{k-1})")->check(CLI::ExistingFile);
  prior_cmd->add_option("--synthetic", po.synthetic, "draw synthetic margins with these observed priors");
  prior_cmd->add_option("--n-pool", po.n_pool)->capture_default_str();
  prior_cmd->add_option("--n-pos", po.n_pos)->capture_default_str();
  prior_cmd->add_option("--bootstrap", po.bootstrap, "bootstrap replicates (0 = none)")->capture_default_str();
  prior_cmd->add_option("--delta", po.delta, "interval level is 1 - delta")->capture_default_str();
  prior_cmd->add_option("--alphas", po.cfg.alphas)->capture_default_str();
  prior_cmd->add_option("--epsilon", po.cfg.epsilon)->capture_default_str();
  prior_cmd->add_option("--lambda", po.cfg.lambda)->capture_default_str();
  prior_cmd->add_option("--bins", po.cfg.bins)->capture_default_str();
  prior_cmd->add_option("--step", po.cfg.step, "0 picks the step automatically")->capture_default_str();
  prior_cmd->add_option("--iters", po.cfg.iters)->capture_default_str();
  prior_cmd->add_option("--out", po.out)->capture_default_str();

  std::string scheme = "adversarial";
  std::vector<double> l1{0.0, 0.05, 0.1, 0.2};
  std::string mode = "reevaluate";
  auto* sweep_cmd = app.add_subcommand("sweep", "class-prior misspecification sweep");
  attach_config(sweep_cmd);
  dso.add(sweep_cmd);
  mo.add(sweep_cmd);
  add_seed(sweep_cmd);
  sweep_cmd->add_option("--checkpoint", checkpoint, "reuse a trained scorer")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--scheme", scheme, "scalar_last or adversarial")->capture_default_str();
  sweep_cmd->add_option("--l1", l1, "perturbation magnitudes")->capture_default_str();
  sweep_cmd->add_option("--mode", mode)
      ->check(CLI::IsMember({"reevaluate", "retrain"}))
      ->capture_default_str();
  sweep_cmd->add_option("--out-dir", out_dir)->capture_default_str();

  auto* gen_cmd = app.add_subcommand("gen-data", "write an MPU sample, a test split and a manifest");
  attach_config(gen_cmd);
  dso.add(gen_cmd);
  add_seed(gen_cmd);
  gen_cmd->add_option("--out-dir", out_dir)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (auto* sub : app.get_subcommands()) {
      if (!config_path.empty()) apply_config(sub, config_path);
    }
    if (eval_cmd->parsed() && checkpoint.empty()) throw UsageError("eval needs --checkpoint");
    for (auto* sub : {train_cmd, eval_cmd, prior_cmd, sweep_cmd, gen_cmd}) {
      if (sub->parsed() && sub->get_option("--seed")->count() > 0) seed_given = true;
    }
    if (!seed_given) seed = default_seed();

    if (check->parsed()) return run_check_losses(grid, points, only, out_dir);
    if (train_cmd->parsed()) return run_train(dso, mo, seed, out_dir);
    if (eval_cmd->parsed()) return run_eval(dso, checkpoint, seed, out_dir);
    if (prior_cmd->parsed()) return run_estimate_prior(po, seed);
    if (sweep_cmd->parsed()) return run_sweep(dso, mo, seed, checkpoint, scheme, l1, mode, out_dir);
    if (gen_cmd->parsed()) return run_gen_data(dso, seed, out_dir);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
