#pragma once

// Empirical risks over an MPU sample: k-1 labeled observed-class sets and one
// unlabeled pool. Class indices are 0-based; index k-1 is the negative
// meta-class. Every estimator returns its value together with the gradient
// of that value with respect to each sample's k scores, which the model
// layer backpropagates into parameters.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "csmpu/matrix.hpp"
#include "csmpu/surrogate.hpp"

namespace csmpu {

enum class Correction { none, nn, abs };
enum class Estimator { csmpu, ure_ovr, biased_super, area };

inline std::string_view to_string(Correction c) {
  switch (c) {
    case Correction::none: return "none";
    case Correction::nn: return "nn";
    case Correction::abs: return "abs";
  }
  return "?";
}

inline std::string_view to_string(Estimator e) {
  switch (e) {
    case Estimator::csmpu: return "csmpu";
    case Estimator::ure_ovr: return "ure_ovr";
    case Estimator::biased_super: return "biased_super";
    case Estimator::area: return "area";
  }
  return "?";
}

inline std::optional<Correction> parse_correction(std::string_view s) {
  for (auto c : {Correction::none, Correction::nn, Correction::abs}) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

inline std::optional<Estimator> parse_estimator(std::string_view s) {
  for (auto e : {Estimator::csmpu, Estimator::ure_ovr, Estimator::biased_super, Estimator::area}) {
    if (to_string(e) == s) return e;
  }
  return std::nullopt;
}

inline constexpr double kPriorSumTolerance = 1e-9;

inline void validate_priors(std::span<const double> priors) {
  if (priors.size() < 2) throw std::invalid_argument("priors: need at least 2 classes");
  double sum = 0.0;
  for (std::size_t i = 0; i < priors.size(); ++i) {
    if (!(priors[i] >= 0.0 && priors[i] <= 1.0)) {
      throw std::invalid_argument("priors: entry " + std::to_string(i) + " outside [0,1]");
    }
    sum += priors[i];
  }
  if (std::abs(sum - 1.0) > kPriorSumTolerance) {
    throw std::invalid_argument("priors: sum " + std::to_string(sum) + " != 1");
  }
}

struct RiskConfig {
  std::size_t k = 2;
  std::vector<double> priors;  ///< pi_1..pi_k; the last entry is the meta-class prior
  SurrogateSpec surrogate;
  Correction correction = Correction::none;
  Estimator estimator = Estimator::csmpu;

  double meta_prior() const { return priors.back(); }

  void validate() const {
    if (k < 2) throw std::invalid_argument("risk config: k must be >= 2");
    if (priors.size() != k) {
      throw std::invalid_argument("risk config: expected " + std::to_string(k) + " priors, got " +
                                  std::to_string(priors.size()));
    }
    validate_priors(priors);
    surrogate.validate();
  }
};

struct RiskReport {
  Estimator estimator = Estimator::csmpu;
  Correction correction = Correction::none;
  double total = 0.0;
  std::vector<double> per_class_terms;
  double constant_offset = 0.0;
  bool corrected = false;
};

/// Scores f(x) in R^k for every sample, grouped like the MPU sample.
struct SetScores {
  std::vector<Matrix> observed;  ///< k-1 matrices, n_i x k
  Matrix pool;                   ///< n_u x k

  /// Same shape, all zeros.
  SetScores zeros_like() const {
    SetScores out;
    for (const auto& m : observed) out.observed.emplace_back(m.rows(), m.cols());
    out.pool = Matrix(pool.rows(), pool.cols());
    return out;
  }
};

struct RiskEvaluation {
  RiskReport report;
  SetScores score_gradient;  ///< d total / d scores; empty unless requested
};

inline double apply_correction(double value, Correction mode) {
  switch (mode) {
    case Correction::none: return value;
    case Correction::nn: return value > 0.0 ? value : 0.0;
    case Correction::abs: return std::abs(value);
  }
  return value;
}

/// Derivative of the correction map; 0 at the origin for nn and abs.
inline double correction_slope(double value, Correction mode) {
  switch (mode) {
    case Correction::none: return 1.0;
    case Correction::nn: return value > 0.0 ? 1.0 : 0.0;
    case Correction::abs: return value > 0.0 ? 1.0 : (value < 0.0 ? -1.0 : 0.0);
  }
  return 1.0;
}

/// Lowest index of the largest score among the observed classes 0..k-2.
inline std::size_t top_observed_class(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t j = 1; j + 1 < scores.size(); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return best;
}

/// L_i = l(f_i) + l(-f_k) for an observed class i < k-1.
inline double observed_class_loss(std::span<const double> scores, std::size_t i,
                                  const SurrogateSpec& spec) {
  const std::size_t k = scores.size();
  if (k < 2 || i + 1 >= k) {
    throw std::out_of_range("observed_class_loss: class " + std::to_string(i) +
                            " is not an observed class for k=" + std::to_string(k));
  }
  return eval_loss(spec, scores[i]) + eval_loss(spec, -scores[k - 1]);
}

/// L_k = l(f_k) + l(-f_{i*}) with i* the most confident observed class.
inline double meta_class_loss(std::span<const double> scores, const SurrogateSpec& spec) {
  const std::size_t k = scores.size();
  if (k < 2) throw std::invalid_argument("meta_class_loss: need k >= 2");
  const std::size_t top = top_observed_class(scores);
  return eval_loss(spec, scores[k - 1]) + eval_loss(spec, -scores[top]);
}

/// Combines per-set means into the cost-sensitive MPU risk
///   g( sum_i 2 pi_i g(mu_i) + g(mu_u - 2 (1 - pi_k) C) ),
/// g picked by cfg.correction (identity when none).
inline RiskReport csmpu_empirical_risk(const RiskConfig& cfg, std::span<const double> labeled_means,
                                       double unlabeled_mean) {
  cfg.validate();
  if (cfg.estimator != Estimator::csmpu) {
    throw std::invalid_argument("csmpu_empirical_risk: estimator is not csmpu");
  }
  if (labeled_means.size() + 1 != cfg.k) {
    throw std::invalid_argument("csmpu_empirical_risk: expected k-1 labeled means");
  }
  const double offset = 2.0 * (1.0 - cfg.meta_prior()) * cfg.surrogate.constant_sum;
  RiskReport r;
  r.estimator = Estimator::csmpu;
  r.correction = cfg.correction;
  r.corrected = cfg.correction != Correction::none;
  r.constant_offset = -offset;
  r.per_class_terms.resize(cfg.k);

  double inner = 0.0;
  for (std::size_t i = 0; i + 1 < cfg.k; ++i) {
    if (!std::isfinite(labeled_means[i])) throw std::domain_error("csmpu risk: non-finite mean");
    r.per_class_terms[i] = 2.0 * cfg.priors[i] * apply_correction(labeled_means[i], cfg.correction);
    inner += r.per_class_terms[i];
  }
  if (!std::isfinite(unlabeled_mean)) throw std::domain_error("csmpu risk: non-finite mean");
  if (cfg.correction == Correction::none) {
    r.per_class_terms.back() = unlabeled_mean;
    r.total = inner + unlabeled_mean - offset;
  } else {
    // reported with the offset added back so that sum(terms) + offset is the inner aggregate
    const double shifted = apply_correction(unlabeled_mean - offset, cfg.correction);
    r.per_class_terms.back() = shifted + offset;
    r.total = apply_correction(inner + shifted, cfg.correction);
  }
  return r;
}

namespace detail {

inline void check_shapes(const RiskConfig& cfg, const SetScores& s) {
  if (s.observed.size() + 1 != cfg.k) {
    throw std::invalid_argument("risk: expected " + std::to_string(cfg.k - 1) +
                                " observed sets, got " + std::to_string(s.observed.size()));
  }
  for (std::size_t i = 0; i < s.observed.size(); ++i) {
    if (s.observed[i].rows() == 0) {
      throw std::invalid_argument("risk: observed class " + std::to_string(i) + " has no samples");
    }
    if (s.observed[i].cols() != cfg.k) throw std::invalid_argument("risk: score width != k");
  }
  if (s.pool.rows() == 0) throw std::invalid_argument("risk: unlabeled pool is empty");
  if (s.pool.cols() != cfg.k) throw std::invalid_argument("risk: score width != k");
}

/// Adds `weight * dl(sign * f_c)/df_c` into grad[c].
inline void add_loss_grad(const SurrogateSpec& spec, std::span<const double> scores,
                          std::span<double> grad, std::size_t c, double sign, double weight) {
  if (grad.empty() || weight == 0.0) return;
  grad[c] += weight * sign * loss_derivative(spec, sign * scores[c]);
}

/// OVR surrogate l(f_y) + 1/(k-1) sum_{i != y} l(-f_i), optional gradient.
inline double ovr_loss(const SurrogateSpec& spec, std::span<const double> s, std::size_t y,
                       std::span<double> grad, double weight) {
  const std::size_t k = s.size();
  const double w_neg = 1.0 / static_cast<double>(k - 1);
  double v = eval_loss(spec, s[y]);
  add_loss_grad(spec, s, grad, y, 1.0, weight);
  for (std::size_t i = 0; i < k; ++i) {
    if (i == y) continue;
    v += w_neg * eval_loss(spec, -s[i]);
    add_loss_grad(spec, s, grad, i, -1.0, weight * w_neg);
  }
  return v;
}

inline double observed_loss_grad(const SurrogateSpec& spec, std::span<const double> s,
                                 std::size_t i, std::span<double> grad, double weight) {
  const std::size_t meta = s.size() - 1;
  add_loss_grad(spec, s, grad, i, 1.0, weight);
  add_loss_grad(spec, s, grad, meta, -1.0, weight);
  return eval_loss(spec, s[i]) + eval_loss(spec, -s[meta]);
}

inline double meta_loss_grad(const SurrogateSpec& spec, std::span<const double> s,
                             std::span<double> grad, double weight) {
  const std::size_t meta = s.size() - 1;
  const std::size_t top = top_observed_class(s);
  add_loss_grad(spec, s, grad, meta, 1.0, weight);
  add_loss_grad(spec, s, grad, top, -1.0, weight);
  return eval_loss(spec, s[meta]) + eval_loss(spec, -s[top]);
}

/// Mean of per-row losses; when `grad` is non-empty, adds
/// `weight / n * d loss / d row` into the matching gradient rows.
template <typename RowLoss>
double mean_over_rows(const Matrix& scores, Matrix* grad, double weight, RowLoss&& loss) {
  const double n = static_cast<double>(scores.rows());
  double sum = 0.0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    std::span<double> g = grad ? grad->row(r) : std::span<double>{};
    sum += loss(scores.row(r), g, weight / n);
  }
  return sum / n;
}

inline void scale(Matrix& m, double w) {
  for (double& v : m.data()) v *= w;
}

inline RiskEvaluation csmpu_eval(const RiskConfig& cfg, const SetScores& s, bool want_grad) {
  const auto& spec = cfg.surrogate;
  RiskEvaluation out;
  if (want_grad) out.score_gradient = s.zeros_like();
  // gradients are first accumulated per set with unit weight, then rescaled
  // once the correction slopes are known
  std::vector<double> means(cfg.k - 1);
  for (std::size_t i = 0; i + 1 < cfg.k; ++i) {
    means[i] = mean_over_rows(s.observed[i], want_grad ? &out.score_gradient.observed[i] : nullptr,
                              1.0, [&](auto row, auto g, double w) {
                                return observed_loss_grad(spec, row, i, g, w);
                              });
  }
  const double mu_u = mean_over_rows(s.pool, want_grad ? &out.score_gradient.pool : nullptr, 1.0,
                                     [&](auto row, auto g, double w) {
                                       return meta_loss_grad(spec, row, g, w);
                                     });

  out.report = csmpu_empirical_risk(cfg, means, mu_u);
  if (!want_grad) return out;

  const double offset = -out.report.constant_offset;
  double inner = 0.0;
  for (std::size_t i = 0; i + 1 < cfg.k; ++i) inner += out.report.per_class_terms[i];
  const double shifted = apply_correction(mu_u - offset, cfg.correction);
  const double outer = correction_slope(inner + shifted, cfg.correction);
  for (std::size_t i = 0; i + 1 < cfg.k; ++i) {
    scale(out.score_gradient.observed[i],
          outer * 2.0 * cfg.priors[i] * correction_slope(means[i], cfg.correction));
  }
  scale(out.score_gradient.pool, outer * correction_slope(mu_u - offset, cfg.correction));
  return out;
}

/// Plain supervised risk on the union of all sets with pool rows labeled k:
/// one mean over every row, so each set weighs in by its size.
inline RiskEvaluation biased_super_eval(const RiskConfig& cfg, const SetScores& s,
                                        bool want_grad) {
  const auto& spec = cfg.surrogate;
  RiskEvaluation out;
  if (want_grad) out.score_gradient = s.zeros_like();
  auto& r = out.report;
  r.estimator = Estimator::biased_super;
  r.correction = Correction::none;
  r.per_class_terms.resize(cfg.k);
  double n_total = static_cast<double>(s.pool.rows());
  for (const auto& m : s.observed) n_total += static_cast<double>(m.rows());
  for (std::size_t i = 0; i + 1 < cfg.k; ++i) {
    const double share = static_cast<double>(s.observed[i].rows()) / n_total;
    r.per_class_terms[i] =
        share * mean_over_rows(s.observed[i], want_grad ? &out.score_gradient.observed[i] : nullptr,
                               share, [&](auto row, auto g, double w) {
                                 return ovr_loss(spec, row, i, g, w);
                               });
  }
  const double share = static_cast<double>(s.pool.rows()) / n_total;
  r.per_class_terms.back() =
      share * mean_over_rows(s.pool, want_grad ? &out.score_gradient.pool : nullptr, share,
                             [&](auto row, auto g, double w) {
                               return ovr_loss(spec, row, cfg.k - 1, g, w);
                             });
  for (double t : r.per_class_terms) r.total += t;
  return out;
}

inline RiskEvaluation ure_ovr_eval(const RiskConfig& cfg, const SetScores& s, bool want_grad) {
  const auto& spec = cfg.surrogate;
  const std::size_t meta = cfg.k - 1;
  RiskEvaluation out;
  if (want_grad) out.score_gradient = s.zeros_like();
  auto& r = out.report;
  r.estimator = Estimator::ure_ovr;
  r.correction = Correction::none;
  r.per_class_terms.resize(cfg.k);
  for (std::size_t i = 0; i < meta; ++i) {
    const double pi = cfg.priors[i];
    r.per_class_terms[i] =
        pi * mean_over_rows(s.observed[i], want_grad ? &out.score_gradient.observed[i] : nullptr,
                            pi, [&](auto row, auto g, double w) {
                              return ovr_loss(spec, row, i, g, w) - ovr_loss(spec, row, meta, g, -w);
                            });
  }
  r.per_class_terms.back() =
      mean_over_rows(s.pool, want_grad ? &out.score_gradient.pool : nullptr, 1.0,
                     [&](auto row, auto g, double w) { return ovr_loss(spec, row, meta, g, w); });
  for (double t : r.per_class_terms) r.total += t;
  return out;
}

inline RiskEvaluation area_eval(const RiskConfig& cfg, const SetScores& s, bool want_grad) {
  const auto& spec = cfg.surrogate;
  const std::size_t meta = cfg.k - 1;
  const double km1 = static_cast<double>(cfg.k - 1);
  const double labeled_scale = static_cast<double>(cfg.k) / km1;
  RiskEvaluation out;
  if (want_grad) out.score_gradient = s.zeros_like();
  auto& r = out.report;
  r.estimator = Estimator::area;
  r.correction = Correction::none;
  r.per_class_terms.resize(cfg.k);
  for (std::size_t i = 0; i < meta; ++i) {
    const double w_i = labeled_scale * cfg.priors[i];
    r.per_class_terms[i] =
        w_i * mean_over_rows(s.observed[i], want_grad ? &out.score_gradient.observed[i] : nullptr,
                             w_i, [&](auto row, auto g, double w) {
                               return observed_loss_grad(spec, row, i, g, w);
                             });
  }
  r.per_class_terms.back() = mean_over_rows(
      s.pool, want_grad ? &out.score_gradient.pool : nullptr, 1.0,
      [&](auto row, auto g, double w) {
        double v = eval_loss(spec, row[meta]);
        add_loss_grad(spec, row, g, meta, 1.0, w);
        for (std::size_t i = 0; i < meta; ++i) {
          v += eval_loss(spec, -row[i]) / km1;
          add_loss_grad(spec, row, g, i, -1.0, w / km1);
        }
        return v;
      });
  for (double t : r.per_class_terms) r.total += t;
  return out;
}

}  // namespace detail

/// Value of the configured estimator on grouped scores, plus the gradient
/// with respect to every score when `with_gradient` is set. Corrections
/// apply to the csmpu estimator only; baselines are reported uncorrected.
inline RiskEvaluation evaluate_risk(const RiskConfig& cfg, const SetScores& scores,
                                    bool with_gradient = false) {
  cfg.validate();
  detail::check_shapes(cfg, scores);
  switch (cfg.estimator) {
    case Estimator::csmpu: return detail::csmpu_eval(cfg, scores, with_gradient);
    case Estimator::biased_super: return detail::biased_super_eval(cfg, scores, with_gradient);
    case Estimator::ure_ovr: return detail::ure_ovr_eval(cfg, scores, with_gradient);
    case Estimator::area: return detail::area_eval(cfg, scores, with_gradient);
  }
  throw std::logic_error("unknown estimator");
}

/// Treats the whole pool as meta-class and trains a plain OVR objective.
inline RiskReport biased_super_risk(RiskConfig cfg, const SetScores& scores) {
  cfg.estimator = Estimator::biased_super;
  return evaluate_risk(cfg, scores).report;
}

/// Unbiased OVR baseline with the composite loss L(f,i) - L(f,k); may be negative.
inline RiskReport ure_ovr_risk(RiskConfig cfg, const SetScores& scores) {
  cfg.estimator = Estimator::ure_ovr;
  return evaluate_risk(cfg, scores).report;
}

enum class RangeCheck { off, require_bounded };

/// Subtraction-free AREA objective. With RangeCheck::require_bounded the
/// surrogate must map into [0, C], which makes the total nonnegative.
inline RiskReport area_risk(RiskConfig cfg, const SetScores& scores,
                            RangeCheck check = RangeCheck::off) {
  cfg.estimator = Estimator::area;
  if (check == RangeCheck::require_bounded && !has_bounded_range(cfg.surrogate)) {
    throw std::domain_error("area_risk: surrogate " + std::string(to_string(cfg.surrogate.family)) +
                            "/" + std::string(to_string(cfg.surrogate.sym_clip)) +
                            " has no bounded range");
  }
  return evaluate_risk(cfg, scores).report;
}

}  // namespace csmpu
