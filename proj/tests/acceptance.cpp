// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "csmpu/csmpu.hpp"

using namespace csmpu;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && secs > budget_s) {
    out.pass = false;
    out.detail += "; over the " + fmt6(budget_s) + " s budget";
  }
  if (!out.pass) ++failures;
  std::printf("%s criterion %d: %s (%s; %.1f s)\n", out.pass ? "PASS" : "FAIL", id, title,
              out.detail.c_str(), secs);
  std::fflush(stdout);
}

SurrogateSpec spec_of(LossFamily f, SymClip s = SymClip::raw) {
  SurrogateSpec spec;
  spec.family = f;
  spec.sym_clip = s;
  return spec;
}

// ---------------------------------------------------------------------------
// 1. Constant-sum table

Outcome constant_sum_table() {
  std::ostringstream msg;
  bool ok = true;
  auto check = [&](const char* name, double value, double lo, double hi) {
    const bool good = value >= lo && value <= hi;
    ok = ok && good;
    msg << name << '=' << fmt6(value) << (good ? "" : "!") << ' ';
  };
  const auto hinge = constant_sum_check(spec_of(LossFamily::hinge), -10, 10, 2001);
  check("hinge.max", hinge.max_residual, 9.99, 10.01);
  check("hinge.p99", hinge.p99_residual, 9.85, 9.95);
  check("logistic.max", constant_sum_check(spec_of(LossFamily::logistic), -10, 10, 2001).max_residual,
        8.99, 9.01);
  check("ramp.max", constant_sum_check(spec_of(LossFamily::ramp), -10, 10, 2001).max_residual, 0.99,
        1.01);
  for (auto f : {LossFamily::hinge, LossFamily::ramp}) {
    const auto r = constant_sum_check(spec_of(f, SymClip::sym), -10, 10, 2001);
    check((std::string(to_string(f)) + "-sym.max").c_str(), r.max_residual, 0.0, 1e-12);
  }
  for (auto f : {LossFamily::sigmoid_prob, LossFamily::tanh_smooth, LossFamily::unhinged}) {
    const auto r = constant_sum_check(spec_of(f), -10, 10, 2001);
    check((std::string(to_string(f)) + ".max").c_str(), r.max_residual, 0.0, 1e-6);
  }
  return {ok, msg.str()};
}

// ---------------------------------------------------------------------------
// 2. Unbiasedness against quadrature

double sigmoid_loss(double z) { return 1.0 / (1.0 + std::exp(z)); }

// L_i and L_k written out directly from their definitions.
double oracle_observed(std::span<const double> f, std::size_t i) {
  return sigmoid_loss(f[i]) + sigmoid_loss(-f.back());
}

double oracle_meta(std::span<const double> f) {
  std::size_t best = 0;
  for (std::size_t j = 1; j + 1 < f.size(); ++j) {
    if (f[j] > f[best]) best = j;
  }
  return sigmoid_loss(f.back()) + sigmoid_loss(-f[best]);
}

Outcome unbiasedness() {
  const std::size_t k = 4;
  SyntheticFamily fam{k, uniform_observed_priors(k, 0.5), 3.0, 1.0};
  const auto means = polygon_means(k, fam.separation);
  const Scorer scorer = init_scorer(default_mlp(2, k), 2024);

  // Midpoint rule on mean +- 8 sigma, 400 x 400 cells, Gaussian weights.
  const int cells = 400;
  const double half = 8.0, h = 2.0 * half / cells;
  std::vector<double> obs_expect(k - 1, 0.0), meta_expect(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    Matrix grid(static_cast<std::size_t>(cells) * cells, 2);
    std::vector<double> w(grid.rows());
    double wsum = 0.0;
    for (int a = 0; a < cells; ++a) {
      for (int b = 0; b < cells; ++b) {
        const double u = -half + (a + 0.5) * h, v = -half + (b + 0.5) * h;
        const std::size_t r = static_cast<std::size_t>(a) * cells + b;
        grid(r, 0) = means[c][0] + u;
        grid(r, 1) = means[c][1] + v;
        w[r] = std::exp(-0.5 * (u * u + v * v));
        wsum += w[r];
      }
    }
    const Matrix f = scorer.infer(grid);
    for (std::size_t r = 0; r < grid.rows(); ++r) {
      const double p = w[r] / wsum;
      if (c + 1 < k) obs_expect[c] += p * oracle_observed(f.row(r), c);
      meta_expect[c] += p * oracle_meta(f.row(r));
    }
  }
  double population = -2.0 * (1.0 - fam.priors.back());  // C = 1 for sigmoid_prob
  for (std::size_t i = 0; i + 1 < k; ++i) population += 2.0 * fam.priors[i] * obs_expect[i];
  for (std::size_t c = 0; c < k; ++c) population += fam.priors[c] * meta_expect[c];

  RiskConfig cfg;
  cfg.k = k;
  cfg.priors = fam.priors;
  cfg.surrogate = spec_of(LossFamily::sigmoid_prob);
  cfg.correction = Correction::none;
  const int resamples = 10000;
  double sum = 0.0, sum2 = 0.0;
  std::mt19937_64 rng(99);
  for (int t = 0; t < resamples; ++t) {
    const auto ds = gen_synthetic(fam, 50, 200, rng);
    const double r = scorer_risk(cfg, ds.sample, scorer).total;
    sum += r;
    sum2 += r * r;
  }
  const double mean = sum / resamples;
  const double se = std::sqrt((sum2 / resamples - mean * mean) / (resamples - 1));
  const double z = (mean - population) / se;
  std::ostringstream msg;
  msg << "MC mean " << fmt6(mean) << ", quadrature " << fmt6(population) << ", SE " << fmt6(se)
      << ", z=" << fmt6(z);
  return {std::abs(z) <= 3.0, msg.str()};
}

// ---------------------------------------------------------------------------
// 3. Gradient exactness

Outcome gradient_exactness() {
  const std::pair<Estimator, Correction> variants[] = {
      {Estimator::csmpu, Correction::none}, {Estimator::csmpu, Correction::nn},
      {Estimator::csmpu, Correction::abs},  {Estimator::ure_ovr, Correction::none},
      {Estimator::biased_super, Correction::none}, {Estimator::area, Correction::none}};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<std::size_t> kdist(2, 4), ndist(3, 8);
  std::uniform_real_distribution<double> unit(0.05, 1.0);
  double worst = 0.0;
  int instances = 0, skipped = 0;
  while (instances < 50) {
    const std::size_t k = kdist(rng), d = 3;
    MpuSample s;
    for (std::size_t i = 0; i + 1 < k; ++i) {
      Matrix m(ndist(rng), d);
      for (double& v : m.data()) v = normal(rng);
      s.observed.push_back(std::move(m));
    }
    s.pool = Matrix(ndist(rng) + 4, d);
    for (double& v : s.pool.data()) v = normal(rng);
    std::vector<double> p(k);
    for (double& v : p) v = unit(rng);
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v /= total;
    s.priors = p;
    Scorer scorer = init_scorer(Architecture{{d, 6, k}, true}, rng());

    // Skip instances near a kink: argmax ties in the meta-class loss or a
    // corrected term close to zero.
    const Matrix scores = scorer.forward(training_rows(s), Mode::train, nullptr, false);
    double min_gap = 1e9;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      std::vector<double> obs(scores.row(r).begin(), scores.row(r).end() - 1);
      std::sort(obs.begin(), obs.end(), std::greater<>());
      if (obs.size() > 1) min_gap = std::min(min_gap, obs[0] - obs[1]);
    }
    RiskConfig raw;
    raw.k = k;
    raw.priors = p;
    raw.surrogate = spec_of(LossFamily::sigmoid_prob);
    const auto base = risk_gradient_terms(raw, s, scorer).report;
    const double inner_u = base.per_class_terms.back() + base.constant_offset;
    if (min_gap < 1e-3 || std::abs(inner_u) < 1e-3 || std::abs(base.total) < 1e-3) {
      ++skipped;
      continue;
    }
    ++instances;
    for (auto [e, c] : variants) {
      RiskConfig cfg = raw;
      cfg.estimator = e;
      cfg.correction = c;
      const auto g = risk_gradient_terms(cfg, s, scorer);
      const double err = grad_check(scorer.parameters(), g.gradient,
                                    [&] { return risk_gradient_terms(cfg, s, scorer).report.total; },
                                    scorer.parameter_count(), instances);
      worst = std::max(worst, err);
    }
  }
  std::ostringstream msg;
  msg << "max relative error " << fmt6(worst) << " over 50 instances x 6 estimators, " << skipped
      << " near-kink draws skipped";
  return {worst <= 1e-4, msg.str()};
}

// ---------------------------------------------------------------------------
// 4. Prior recovery and bootstrap coverage

Outcome prior_recovery() {
  const std::vector<std::vector<double>> settings{{0.1}, {0.3}, {0.4}, {0.1, 0.3, 0.4}};
  bool ok = true;
  std::ostringstream msg;
  double worst_err = 0.0;
  for (const auto& truth : settings) {
    std::vector<int> cover(truth.size(), 0);
    for (int t = 0; t < 100; ++t) {
      std::mt19937_64 rng(1000 + t);
      const auto data = sample_margins(MarginMixture{truth}, 10000, 10000, rng);
      const auto est = bootstrap_priors(data, 200, 0.05, 77 + t);
      for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto [lo, hi] = (*est.interval)[i];
        cover[i] += lo <= truth[i] && truth[i] <= hi;
        worst_err = std::max(worst_err, std::abs(est.point[i] - truth[i]));
      }
    }
    msg << (truth.size() + 1) << "-class pi=(";
    for (std::size_t i = 0; i < truth.size(); ++i) msg << (i ? "," : "") << truth[i];
    msg << ") coverage";
    for (int c : cover) {
      msg << ' ' << c;
      ok = ok && c >= 90;
    }
    msg << "/100; ";
  }
  ok = ok && worst_err <= 0.05;
  msg << "max |pi_hat - pi| " << fmt6(worst_err);
  return {ok, msg.str()};
}

// ---------------------------------------------------------------------------
// 5. Downstream ordering

Outcome downstream_ordering() {
  const std::size_t k = 4;
  SyntheticFamily fam{k, uniform_observed_priors(k, 0.2), 3.0, 1.0};
  struct Variant {
    const char* name;
    Estimator e;
    Correction c;
    double acc = 0.0;
    double min_loss = 1e300;
  };
  std::vector<Variant> vs{{"biased_super", Estimator::biased_super, Correction::none},
                          {"csmpu-abs", Estimator::csmpu, Correction::abs},
                          {"csmpu-none", Estimator::csmpu, Correction::none}};
  for (auto& v : vs) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      std::mt19937_64 rng(seed);
      const auto ds = gen_synthetic(fam, 200, 4000, rng);
      const auto test = sample_mixture(fam, 2000, rng);
      TrainConfig cfg;
      cfg.risk.k = k;
      cfg.risk.priors = fam.priors;
      cfg.risk.estimator = v.e;
      cfg.risk.correction = v.c;
      cfg.epochs = 100;
      cfg.seed = seed;
      const auto res = train(cfg, ds.sample, init_scorer(default_mlp(2, k), seed));
      for (const auto& h : res.history) v.min_loss = std::min({v.min_loss, h.batch_risk, h.full_risk});
      v.acc += evaluate(res.scorer, test).accuracy / 5.0;
    }
  }
  const double biased = vs[0].acc, abs = vs[1].acc, none = vs[2].acc;
  std::ostringstream msg;
  msg << "mean accuracy biased_super " << fmt6(biased) << ", csmpu-abs " << fmt6(abs)
      << ", csmpu-none " << fmt6(none) << "; min csmpu-abs epoch loss " << fmt6(vs[1].min_loss)
      << ", min csmpu-none epoch loss " << fmt6(vs[2].min_loss);
  const bool ok = abs >= biased + 0.10 && abs >= none && vs[1].min_loss >= 0.0;
  return {ok, msg.str()};
}

// ---------------------------------------------------------------------------
// 6. Misspecification bound domination

Outcome misspecification_bounds() {
  const std::size_t k = 5;
  SyntheticFamily fam{k, uniform_observed_priors(k, 0.2), 3.0, 1.0};
  std::mt19937_64 rng(6);
  const auto ds = gen_synthetic(fam, 200, 2000, rng);
  const auto test = sample_mixture(fam, 2000, rng);
  TrainConfig cfg;
  cfg.risk.k = k;
  cfg.risk.priors = fam.priors;
  cfg.risk.correction = Correction::abs;
  cfg.epochs = 20;
  cfg.seed = 6;
  const auto fitted = train(cfg, ds.sample, init_scorer(default_mlp(2, k), 6));
  std::vector<double> mags;
  for (int i = 0; i <= 20; ++i) mags.push_back(0.02 * i);

  bool ok = true;
  std::ostringstream msg;
  for (auto scheme : {SweepScheme::adversarial, SweepScheme::scalar_last}) {
    const auto rep = misspecification_sweep(ds.sample, fitted.scorer, cfg.risk, test, scheme, mags);
    ok = ok && !rep.points.empty() && rep.points.front().l1_delta == 0.0 &&
         rep.points.front().empirical_bound == 0.0 && rep.points.front().theory_bound == 0.0;
    for (std::size_t i = 0; i < rep.points.size(); ++i) {
      const auto& p = rep.points[i];
      ok = ok && p.empirical_bound <= p.theory_bound;
      if (scheme == SweepScheme::adversarial && i > 0) {
        ok = ok && p.empirical_bound >= rep.points[i - 1].empirical_bound &&
             p.theory_bound >= rep.points[i - 1].theory_bound;
      }
    }
    const auto& last = rep.points.back();
    msg << to_string(scheme) << ": " << rep.points.size() << " points, at l1="
        << fmt6(last.l1_delta) << " emp " << fmt6(last.empirical_bound) << " <= theory "
        << fmt6(last.theory_bound) << "; ";
  }
  msg << "C_Delta=" << fmt6(kMisspecConstant);
  return {ok, msg.str()};
}

// ---------------------------------------------------------------------------
// 7. Determinism of the train command

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome train_determinism() {
  const fs::path dir = fs::temp_directory_path() / "csmpu_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto run = [&](const std::string& out) {
    const std::string cmd = std::string(CSMPU_CLI_PATH) +
                            " train --dataset synthetic --k 4 --pi-k 0.5 --estimator csmpu "
                            "--correction abs --epochs 10 --seed 11 --out-dir '" +
                            (dir / out).string() + "' > /dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) && WEXITSTATUS(status) == 0;
  };
  if (!run("a") || !run("b")) return {false, "train command failed"};
  const std::string a = slurp(dir / "a" / "history.csv");
  const std::string b = slurp(dir / "b" / "history.csv");
  fs::remove_all(dir);
  std::ostringstream msg;
  msg << "history.csv " << a.size() << " bytes, " << (a == b ? "identical" : "different");
  return {!a.empty() && a == b, msg.str()};
}

// ---------------------------------------------------------------------------
// 8. Projection correctness

Outcome projection() {
  bool ok = true;
  auto near = [](double a, double b) { return std::abs(a - b) <= 5e-5; };
  const auto ex1 = project_feasible(std::vector{0.7, 0.6}, std::vector{0.0, 0.0});
  ok = ok && near(ex1[0], 0.5385) && near(ex1[1], 0.4615);
  ok = ok && project_feasible(std::vector{0.2, 0.3}, std::vector{0.0, 0.0}) ==
                 std::vector<double>{0.2, 0.3};
  ok = ok && project_feasible(std::vector{0.9, 0.9}, std::vector{0.5, 0.5}) ==
                 std::vector<double>{0.5, 0.5};
  const bool examples = ok;

  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> dim(1, 10);
  std::uniform_real_distribution<double> val(-1.0, 2.0);
  int violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = dim(rng);
    std::vector<double> lower(m), pi(m);
    std::uniform_real_distribution<double> low(0.0, 1.0 / static_cast<double>(m));
    for (std::size_t i = 0; i < m; ++i) {
      lower[i] = low(rng);
      pi[i] = val(rng);
    }
    const auto out = project_feasible(pi, lower);
    bool good = std::accumulate(out.begin(), out.end(), 0.0) <= 1.0;
    for (std::size_t i = 0; i < m; ++i) good = good && out[i] >= lower[i];
    good = good && project_feasible(out, lower) == out;
    violations += good ? 0 : 1;
  }
  std::ostringstream msg;
  msg << "listed examples " << (examples ? "hold" : "fail") << ", " << violations
      << " constraint violations in 1000 random inputs";
  return {examples && violations == 0, msg.str()};
}

}  // namespace

int main() {
  report(1, "constant-sum table", 1.0, constant_sum_table);
  report(2, "unbiasedness against quadrature", 120.0, unbiasedness);
  report(3, "gradient exactness", 60.0, gradient_exactness);
  report(4, "prior recovery and bootstrap coverage", 300.0, prior_recovery);
  report(5, "downstream ordering at desk scale", 300.0, downstream_ordering);
  report(6, "misspecification bound domination", 60.0, misspecification_bounds);
  report(7, "train determinism", 0.0, train_determinism);
  report(8, "projection correctness", 0.0, projection);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
