#pragma once

// Class-prior estimation from margins z_i(x) = f_i(x), i < k-1, using only
// the labeled positives P_i and the unlabeled pool U:
//   1. Neyman-Pearson style lower bounds from detector acceptance rates,
//   2. histogram moment matching with an L1 pull toward those bounds,
//   3. bootstrap percentile intervals.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "csmpu/matrix.hpp"
#include "csmpu/surrogate.hpp"

namespace csmpu {

struct PriorEstimate {
  std::vector<double> point;
  std::vector<double> lower_bounds;
  std::optional<std::vector<std::pair<double, double>>> interval;
  std::vector<bool> detectable;
};

/// Margins of the pool and of each observed class's positives. Column i of
/// every matrix holds z_i, so all matrices have k-1 columns.
struct MarginData {
  Matrix pool;
  std::vector<Matrix> positives;

  std::size_t classes() const noexcept { return positives.size(); }

  void validate() const {
    if (positives.empty()) throw std::invalid_argument("margins: no positive sets");
    if (pool.rows() == 0) throw std::invalid_argument("margins: empty pool");
    for (std::size_t i = 0; i < positives.size(); ++i) {
      if (positives[i].rows() == 0) {
        throw std::invalid_argument("margins: positive set " + std::to_string(i) + " is empty");
      }
      if (positives[i].cols() != classes()) throw std::invalid_argument("margins: width != k-1");
    }
    if (pool.cols() != classes()) throw std::invalid_argument("margins: pool width != k-1");
  }
};

struct PriorConfig {
  std::vector<double> alphas = {0.01, 0.02, 0.05};
  double epsilon = 1e-6;
  double lambda = 1e-4;
  std::size_t bins = 64;
  double step = 0.0;  ///< 0 selects 1 / (2 trace(A^T A))
  std::size_t iters = 2000;
};

// ---------------------------------------------------------------------------
// Step 1: lower bounds

/// Linear-interpolation quantile of an already sorted sample.
inline double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// max{0, (P_U[accept] - alpha) / max{P_P[accept], epsilon}}, capped at 1.
inline double np_lower_bound(double pool_accept_rate, double pos_accept_rate, double alpha,
                             double epsilon) {
  const double bound = (pool_accept_rate - alpha) / std::max(pos_accept_rate, epsilon);
  return std::clamp(bound, 0.0, 1.0);
}

struct DetectabilityResult {
  bool detectable = false;
  double lower_bound = 0.0;
};

/// For each alpha the detector accepts margins at or above the alpha-quantile
/// of the positive proxy, so a positive is rejected with probability alpha.
/// The threshold is calibrated on the even-indexed proxy scores and the
/// positive acceptance rate is measured on the odd-indexed ones (both on the
/// full proxy when it has a single score).
inline DetectabilityResult detectability_scan(std::span<const double> pool_scores,
                                              std::span<const double> pos_scores,
                                              std::span<const double> alphas = {},
                                              double epsilon = 1e-6) {
  static constexpr double kDefaultAlphas[] = {0.01, 0.02, 0.05};
  if (alphas.data() == nullptr) alphas = kDefaultAlphas;
  if (alphas.empty()) throw std::invalid_argument("detectability_scan: empty alpha grid");
  if (pool_scores.empty() || pos_scores.empty()) {
    throw std::invalid_argument("detectability_scan: empty score array");
  }
  std::vector<double> calib, held;
  for (std::size_t i = 0; i < pos_scores.size(); ++i) {
    (i % 2 == 0 ? calib : held).push_back(pos_scores[i]);
  }
  if (held.empty()) held = calib;
  std::sort(calib.begin(), calib.end());

  auto accept_rate = [](std::span<const double> scores, double threshold) {
    std::size_t n = 0;
    for (double z : scores) n += z >= threshold ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(scores.size());
  };

  DetectabilityResult out;
  for (double alpha : alphas) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("detectability_scan: alpha");
    const double threshold = sorted_quantile(calib, alpha);
    const double bound = np_lower_bound(accept_rate(pool_scores, threshold),
                                        accept_rate(held, threshold), alpha, epsilon);
    out.lower_bound = std::max(out.lower_bound, bound);
  }
  out.detectable = out.lower_bound > 0.0;
  return out;
}

/// Top-q% of the pool by margin, for when no clean positives exist.
inline std::vector<double> top_q_proxy(std::span<const double> pool_scores, double q_percent = 10.0) {
  if (!(q_percent > 0.0 && q_percent <= 100.0)) throw std::invalid_argument("top_q_proxy: q");
  std::vector<double> sorted(pool_scores.begin(), pool_scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto n = static_cast<std::size_t>(
      std::ceil(q_percent / 100.0 * static_cast<double>(sorted.size())));
  sorted.resize(std::max<std::size_t>(n, 1));
  return sorted;
}

// ---------------------------------------------------------------------------
// Step 2: moment matching

/// Stacked histogram moments. Block i (rows i*bins .. (i+1)*bins-1) uses the
/// bins of margin column i: A[row][j] is the fraction of P_j falling in that
/// bin and b[row] the fraction of the pool.
struct MomentSystem {
  std::size_t rows = 0;
  std::size_t classes = 0;
  std::vector<double> a;  ///< rows x classes, row-major
  std::vector<double> b;
  std::vector<std::vector<double>> bin_edges;  ///< per margin column
  std::vector<bool> empty_rows;                ///< bins no sample fell into

  double at(std::size_t r, std::size_t j) const { return a[r * classes + j]; }
};

/// Uniform edges over the observed range of each margin column.
inline std::vector<std::vector<double>> default_bin_edges(const MarginData& data, std::size_t bins) {
  if (bins < 1) throw std::invalid_argument("bin edges: need at least one bin");
  std::vector<std::vector<double>> edges(data.classes());
  for (std::size_t i = 0; i < data.classes(); ++i) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    auto scan = [&](const Matrix& m) {
      for (std::size_t r = 0; r < m.rows(); ++r) {
        lo = std::min(lo, m(r, i));
        hi = std::max(hi, m(r, i));
      }
    };
    scan(data.pool);
    for (const auto& p : data.positives) scan(p);
    if (!(hi > lo)) hi = lo + 1.0;
    edges[i].resize(bins + 1);
    for (std::size_t e = 0; e <= bins; ++e) {
      edges[i][e] = lo + (hi - lo) * static_cast<double>(e) / static_cast<double>(bins);
    }
  }
  return edges;
}

namespace detail {

/// Bin index with out-of-range values assigned to the end bins. Starts from
/// the uniform-spacing guess and walks to the exact bin.
inline std::size_t bin_of(double z, const std::vector<double>& edges) {
  const std::size_t bins = edges.size() - 1;
  if (!(z >= edges[1])) return 0;
  if (z >= edges[bins - 1]) return bins - 1;
  const double guess = (z - edges.front()) / (edges.back() - edges.front()) * static_cast<double>(bins);
  auto idx = static_cast<std::size_t>(std::clamp(guess, 1.0, static_cast<double>(bins - 2)));
  while (idx > 1 && z < edges[idx]) --idx;
  while (idx < bins - 2 && z >= edges[idx + 1]) ++idx;
  return idx;
}

inline void accumulate_histogram(const Matrix& m, std::size_t column,
                                 const std::vector<double>& edges, std::span<double> out) {
  const double w = 1.0 / static_cast<double>(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[bin_of(m(r, column), edges)] += w;
}

}  // namespace detail

inline MomentSystem build_moment_system(const MarginData& data,
                                        const std::vector<std::vector<double>>& bin_edges) {
  data.validate();
  const std::size_t m = data.classes();
  if (bin_edges.size() != m) throw std::invalid_argument("moment system: need edges per class");
  const std::size_t bins = bin_edges.front().size() - 1;
  for (const auto& e : bin_edges) {
    if (e.size() != bins + 1 || bins < 1) {
      throw std::invalid_argument("moment system: every column needs the same bin count");
    }
    for (std::size_t i = 1; i < e.size(); ++i) {
      if (!(e[i] > e[i - 1])) throw std::invalid_argument("moment system: degenerate bin edges");
    }
  }
  if (bins * m < m) throw std::invalid_argument("moment system: fewer moments than classes");

  MomentSystem sys;
  sys.rows = bins * m;
  sys.classes = m;
  sys.bin_edges = bin_edges;
  sys.a.assign(sys.rows * m, 0.0);
  sys.b.assign(sys.rows, 0.0);
  std::vector<double> hist(bins);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      std::fill(hist.begin(), hist.end(), 0.0);
      detail::accumulate_histogram(data.positives[j], i, bin_edges[i], hist);
      for (std::size_t r = 0; r < bins; ++r) sys.a[(i * bins + r) * m + j] = hist[r];
    }
    std::fill(hist.begin(), hist.end(), 0.0);
    detail::accumulate_histogram(data.pool, i, bin_edges[i], hist);
    for (std::size_t r = 0; r < bins; ++r) sys.b[i * bins + r] = hist[r];
  }
  sys.empty_rows.assign(sys.rows, false);
  for (std::size_t r = 0; r < sys.rows; ++r) {
    bool empty = sys.b[r] == 0.0;
    for (std::size_t j = 0; j < m && empty; ++j) empty = sys.at(r, j) == 0.0;
    sys.empty_rows[r] = empty;
  }
  return sys;
}

/// Clips every coordinate to its lower bound, then, if the total exceeds 1,
/// shrinks the slack above the bounds by a common factor so the total is 1.
inline std::vector<double> project_feasible(std::span<const double> pi,
                                            std::span<const double> lower) {
  if (pi.size() != lower.size()) throw std::invalid_argument("project_feasible: size mismatch");
  const double lower_sum = std::accumulate(lower.begin(), lower.end(), 0.0);
  if (lower_sum > 1.0) {
    throw std::domain_error("project_feasible: lower bounds sum to " + std::to_string(lower_sum) +
                            " > 1, feasible set is empty");
  }
  std::vector<double> out(pi.size());
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (!std::isfinite(pi[i])) throw std::domain_error("project_feasible: non-finite input");
    out[i] = std::max(pi[i], lower[i]);
  }
  auto total = [&] { return std::accumulate(out.begin(), out.end(), 0.0); };
  if (total() <= 1.0) return out;

  double slack = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) slack += out[i] - lower[i];
  const double scale = (1.0 - lower_sum) / slack;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lower[i] + (out[i] - lower[i]) * scale;

  // rounding can leave the total a few ulps above 1; take it from the largest slack
  for (int guard = 0; guard < 8; ++guard) {
    const double excess = total() - 1.0;
    if (excess <= 0.0) break;
    std::size_t widest = 0;
    for (std::size_t i = 1; i < out.size(); ++i) {
      if (out[i] - lower[i] > out[widest] - lower[widest]) widest = i;
    }
    out[widest] = std::max(lower[widest], out[widest] - std::max(excess, 1e-300));
    if (guard >= 4) out[widest] = std::max(lower[widest], std::nextafter(out[widest], 0.0));
  }
  return out;
}

/// ||A pi - b||^2 + lambda ||pi - lower||_1
inline double penalized_objective(const MomentSystem& sys, std::span<const double> pi,
                                  std::span<const double> lower, double lambda) {
  double fit = 0.0;
  for (std::size_t r = 0; r < sys.rows; ++r) {
    double res = -sys.b[r];
    for (std::size_t j = 0; j < sys.classes; ++j) res += sys.at(r, j) * pi[j];
    fit += res * res;
  }
  double pen = 0.0;
  for (std::size_t j = 0; j < pi.size(); ++j) pen += std::abs(pi[j] - lower[j]);
  return fit + lambda * pen;
}

/// Thrown when the objective keeps increasing; retry with a smaller step.
class SolverDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Proximal-gradient minimization of the penalized moment objective over
/// {pi_i >= lower_i, sum pi <= 1}: gradient step on the quadratic,
/// soft-threshold toward `lower`, then project_feasible. Starts from the
/// lower bounds. `fixed_zero[i]` pins a coordinate at 0. A zero `step`
/// uses 1 / (2 trace(A^T A)), which never exceeds the inverse Lipschitz
/// constant of the quadratic's gradient.
inline std::vector<double> solve_penalized_l1(const MomentSystem& sys, std::span<const double> lower,
                                              double lambda, double step, std::size_t iters,
                                              const std::vector<bool>& fixed_zero = {},
                                              std::vector<double>* objective_trace = nullptr) {
  const std::size_t m = sys.classes;
  if (lower.size() != m) throw std::invalid_argument("solver: lower bounds size != classes");
  if (!(lambda >= 0.0)) throw std::invalid_argument("solver: lambda must be >= 0");
  if (!(step >= 0.0)) throw std::invalid_argument("solver: step must be >= 0");
  if (iters < 1) throw std::invalid_argument("solver: iters must be >= 1");

  // normal equations: gradient of the fit term is 2 (A^T A pi - A^T b)
  std::vector<double> ata(m * m, 0.0), atb(m, 0.0);
  for (std::size_t r = 0; r < sys.rows; ++r) {
    for (std::size_t i = 0; i < m; ++i) {
      atb[i] += sys.at(r, i) * sys.b[r];
      for (std::size_t j = 0; j < m; ++j) ata[i * m + j] += sys.at(r, i) * sys.at(r, j);
    }
  }
  if (step == 0.0) {
    double trace = 0.0;
    for (std::size_t i = 0; i < m; ++i) trace += ata[i * m + i];
    if (!(trace > 0.0)) throw std::invalid_argument("solver: moment matrix is all zeros");
    step = 1.0 / (2.0 * trace);
  }
  auto pinned = [&](std::size_t i) { return !fixed_zero.empty() && fixed_zero[i]; };

  double btb = 0.0;
  for (double v : sys.b) btb += v * v;
  // same value as penalized_objective, from the normal equations
  auto objective = [&](const std::vector<double>& p) {
    double fit = btb;
    for (std::size_t i = 0; i < m; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < m; ++j) row += ata[i * m + j] * p[j];
      fit += p[i] * (row - 2.0 * atb[i]);
    }
    double pen = 0.0;
    for (std::size_t i = 0; i < m; ++i) pen += std::abs(p[i] - lower[i]);
    return std::max(fit, 0.0) + lambda * pen;
  };

  std::vector<double> pi = project_feasible(lower, lower);
  for (std::size_t i = 0; i < m; ++i) {
    if (pinned(i)) pi[i] = 0.0;
  }
  double prev = objective(pi);
  if (objective_trace) objective_trace->assign(1, prev);
  std::size_t rising = 0;
  std::vector<double> next(m);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double g = -atb[i];
      for (std::size_t j = 0; j < m; ++j) g += ata[i * m + j] * pi[j];
      const double y = pi[i] - step * 2.0 * g - lower[i];
      const double shrink = step * lambda;
      const double soft = y > shrink ? y - shrink : (y < -shrink ? y + shrink : 0.0);
      next[i] = lower[i] + soft;
    }
    next = project_feasible(next, lower);
    for (std::size_t i = 0; i < m; ++i) {
      if (pinned(i)) next[i] = 0.0;
    }
    if (next == pi) break;  // fixed point
    pi.swap(next);
    const double obj = objective(pi);
    if (objective_trace) objective_trace->push_back(obj);
    if (obj > prev + 1e-9) {
      if (++rising >= 10) {
        throw SolverDiverged("solve_penalized_l1: objective increased for 10 consecutive "
                             "iterations; use a smaller step than " + std::to_string(step));
      }
    } else {
      rising = 0;
    }
    prev = obj;
  }
  return pi;
}

/// Steps 1 and 2 on one set of margins.
inline PriorEstimate estimate_priors(const MarginData& data, const PriorConfig& cfg = {}) {
  data.validate();
  const std::size_t m = data.classes();
  PriorEstimate est;
  est.lower_bounds.resize(m);
  est.detectable.resize(m);
  std::vector<double> pool_col(data.pool.rows());
  std::vector<double> pos_col;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t r = 0; r < data.pool.rows(); ++r) pool_col[r] = data.pool(r, i);
    pos_col.resize(data.positives[i].rows());
    for (std::size_t r = 0; r < pos_col.size(); ++r) pos_col[r] = data.positives[i](r, i);
    const auto scan = detectability_scan(pool_col, pos_col, cfg.alphas, cfg.epsilon);
    est.lower_bounds[i] = scan.lower_bound;
    est.detectable[i] = scan.detectable;
  }
  // keep the bounds jointly feasible
  const double lower_sum = std::accumulate(est.lower_bounds.begin(), est.lower_bounds.end(), 0.0);
  if (lower_sum > 1.0) {
    for (double& l : est.lower_bounds) l /= lower_sum;
  }
  const auto sys = build_moment_system(data, default_bin_edges(data, cfg.bins));
  std::vector<bool> pinned(m);
  for (std::size_t i = 0; i < m; ++i) pinned[i] = !est.detectable[i];
  est.point = solve_penalized_l1(sys, est.lower_bounds, cfg.lambda, cfg.step, cfg.iters, pinned);
  return est;
}

/// Bootstrap replicate `b` of the margins: pool and each positive set are
/// resampled with replacement.
inline MarginData resample_margins(const MarginData& data, std::mt19937_64& rng) {
  auto resample = [&](const Matrix& m) {
    std::uniform_int_distribution<std::size_t> pick(0, m.rows() - 1);
    std::vector<std::size_t> idx(m.rows());
    for (auto& i : idx) i = pick(rng);
    return m.gather(idx);
  };
  MarginData out;
  out.pool = resample(data.pool);
  for (const auto& p : data.positives) out.positives.push_back(resample(p));
  return out;
}

/// Seed of replicate b, derived from the master seed.
inline std::uint64_t replicate_seed(std::uint64_t master, std::size_t b) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(b) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

using MarginResampler = std::function<MarginData(std::mt19937_64&)>;

/// Point estimate on `data` plus per-class percentile intervals at level
/// 1 - delta over B replicates drawn by `resampler`.
inline PriorEstimate bootstrap_priors(const MarginData& data, const MarginResampler& resampler,
                                      std::size_t B, double delta, std::uint64_t seed,
                                      const PriorConfig& cfg = {}) {
  if (B < 2) throw std::invalid_argument("bootstrap: B must be >= 2");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("bootstrap: delta in (0,1)");
  PriorEstimate est = estimate_priors(data, cfg);
  const std::size_t m = data.classes();
  std::vector<std::vector<double>> draws(m, std::vector<double>(B));
  for (std::size_t b = 0; b < B; ++b) {
    std::mt19937_64 rng(replicate_seed(seed, b));
    const auto rep = estimate_priors(resampler(rng), cfg);
    for (std::size_t i = 0; i < m; ++i) draws[i][b] = rep.point[i];
  }
  std::vector<std::pair<double, double>> interval(m);
  for (std::size_t i = 0; i < m; ++i) {
    interval[i] = {quantile_linear(draws[i], delta / 2.0), quantile_linear(draws[i], 1.0 - delta / 2.0)};
  }
  est.interval = std::move(interval);
  return est;
}

inline PriorEstimate bootstrap_priors(const MarginData& data, std::size_t B, double delta,
                                      std::uint64_t seed, const PriorConfig& cfg = {}) {
  return bootstrap_priors(
      data, [&](std::mt19937_64& rng) { return resample_margins(data, rng); }, B, delta, seed, cfg);
}

// ---------------------------------------------------------------------------
// Synthetic margins with known priors

/// Margins of a (k-1)-observed-class mixture: a class-i sample has
/// z_i ~ N(shift, sigma^2) and z_j ~ N(0, sigma^2) for j != i; a meta-class
/// sample has every z_j ~ N(-shift, sigma^2). `observed_priors` holds
/// pi_1..pi_{k-1}; the meta-class takes the rest.
struct MarginMixture {
  std::vector<double> observed_priors;
  double shift = 6.0;
  double sigma = 1.0;
};

inline MarginData sample_margins(const MarginMixture& mix, std::size_t n_pool, std::size_t n_pos,
                                 std::mt19937_64& rng) {
  const std::size_t m = mix.observed_priors.size();
  if (m == 0) throw std::invalid_argument("margin mixture: no observed classes");
  std::vector<double> weights = mix.observed_priors;
  const double rest = 1.0 - std::accumulate(weights.begin(), weights.end(), 0.0);
  if (rest < -1e-12) throw std::invalid_argument("margin mixture: observed priors exceed 1");
  weights.push_back(std::max(rest, 0.0));
  std::normal_distribution<double> noise(0.0, mix.sigma);
  auto draw = [&](std::size_t cls, std::span<double> row) {
    for (std::size_t j = 0; j < m; ++j) {
      const double mean = cls == m ? -mix.shift : (cls == j ? mix.shift : 0.0);
      row[j] = mean + noise(rng);
    }
  };
  MarginData out;
  for (std::size_t i = 0; i < m; ++i) {
    Matrix p(n_pos, m);
    for (std::size_t r = 0; r < n_pos; ++r) draw(i, p.row(r));
    out.positives.push_back(std::move(p));
  }
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  out.pool = Matrix(n_pool, m);
  for (std::size_t r = 0; r < n_pool; ++r) draw(pick(rng), out.pool.row(r));
  return out;
}

}  // namespace csmpu
