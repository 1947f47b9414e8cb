#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csmpu/data.hpp"
#include "csmpu/metrics.hpp"
#include "csmpu/model.hpp"
#include "csmpu/objective.hpp"
#include "csmpu/risk.hpp"
#include "csmpu/surrogate.hpp"

namespace csmpu {

inline constexpr std::array<double, 4> kPaperLearningRates = {1e-3, 5e-4, 1e-5, 1e-6};

struct TrainConfig {
  RiskConfig risk;
  std::size_t epochs = 100;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;

  void validate() const {
    risk.validate();
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    if (eval_every == 0) throw std::invalid_argument("train: eval_every must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("train: learning_rate must be positive");
    }
  }
};

/// Adaptive-moment optimizer with bias correction and no weight decay.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) {
      throw std::invalid_argument("adam: size mismatch");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

/// One history row. Epoch 0 describes the initial scorer.
struct EpochRecord {
  std::size_t epoch = 0;
  double batch_risk = 0.0;  ///< mean of the per-step objective values
  double full_risk = 0.0;   ///< objective on the whole training sample, inference mode
  std::optional<double> accuracy;
  std::optional<double> macro_f1;
};

struct TrainResult {
  Scorer scorer;
  std::vector<EpochRecord> history;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::size_t epoch, std::size_t batch)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

/// Number of optimizer steps per epoch: ceil(total rows / batch size).
inline std::size_t steps_per_epoch(const MpuSample& sample, std::size_t batch_size) {
  std::size_t n = sample.pool.rows();
  for (const auto& m : sample.observed) n += m.rows();
  return std::max<std::size_t>(1, (n + batch_size - 1) / batch_size);
}

/// Every set is shuffled and cut into `steps` contiguous chunks; batch b
/// takes chunk b of every set, so each batch sees all classes and the pool.
inline std::vector<MpuSample> make_batches(const MpuSample& sample, std::size_t steps,
                                           std::mt19937_64& rng) {
  auto chunks = [&](const Matrix& m, const std::string& name) {
    if (m.rows() < steps) {
      throw std::invalid_argument("train: " + name + " has " + std::to_string(m.rows()) +
                                  " rows, fewer than the " + std::to_string(steps) +
                                  " batches per epoch; increase batch_size");
    }
    std::vector<std::size_t> order(m.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Matrix> out;
    for (std::size_t b = 0; b < steps; ++b) {
      const std::size_t lo = b * m.rows() / steps;
      const std::size_t hi = (b + 1) * m.rows() / steps;
      out.push_back(m.gather(std::span<const std::size_t>(order).subspan(lo, hi - lo)));
    }
    return out;
  };
  std::vector<MpuSample> batches(steps);
  for (std::size_t i = 0; i < sample.observed.size(); ++i) {
    auto parts = chunks(sample.observed[i], "observed set " + std::to_string(i));
    for (std::size_t b = 0; b < steps; ++b) batches[b].observed.push_back(std::move(parts[b]));
  }
  auto pool_parts = chunks(sample.pool, "unlabeled pool");
  for (std::size_t b = 0; b < steps; ++b) {
    batches[b].pool = std::move(pool_parts[b]);
    batches[b].priors = sample.priors;
  }
  return batches;
}

/// Minimizes the configured estimator with Adam. `eval`, when given, is
/// scored every `eval_every` epochs (and at epoch 0).
inline TrainResult train(const TrainConfig& cfg, const MpuSample& sample, Scorer scorer,
                         const LabeledSet* eval = nullptr) {
  cfg.validate();
  sample.validate();
  if (sample.k() != cfg.risk.k) throw std::invalid_argument("train: dataset k != risk k");
  if (scorer.input_dim() != sample.feature_dim() || scorer.output_dim() != cfg.risk.k) {
    throw std::invalid_argument("train: scorer shape does not match the dataset");
  }
  TrainResult result;
  auto record = [&](std::size_t epoch, double batch_risk) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.full_risk = scorer_risk(cfg.risk, sample, scorer).total;
    rec.batch_risk = epoch == 0 ? rec.full_risk : batch_risk;
    if (eval && epoch % cfg.eval_every == 0) {
      const auto m = evaluate(scorer, *eval);
      rec.accuracy = m.accuracy;
      rec.macro_f1 = m.macro_f1;
    }
    result.history.push_back(rec);
  };
  record(0, 0.0);

  std::mt19937_64 rng(cfg.seed);
  Adam adam(scorer.parameter_count(), cfg.learning_rate);
  const std::size_t steps = steps_per_epoch(sample, cfg.batch_size);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = make_batches(sample, steps, rng);
    double risk_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto step = risk_gradient_terms(cfg.risk, batches[b], scorer, true);
      if (!std::isfinite(step.report.total)) throw NonFiniteLoss(epoch, b);
      for (double g : step.gradient) {
        if (!std::isfinite(g)) throw NonFiniteLoss(epoch, b);
      }
      risk_sum += step.report.total;
      adam.step(scorer.parameters(), step.gradient);
    }
    record(epoch, risk_sum / static_cast<double>(batches.size()));
  }
  result.scorer = std::move(scorer);
  return result;
}

// ---------------------------------------------------------------------------
// Learning-rate selection

struct ValidationSplit {
  MpuSample train;
  LabeledSet validation;
};

/// Holds out the last 10% (after a seeded shuffle) of every observed set and
/// of the pool. Pool rows are labeled with their hidden labels, so the
/// dataset must carry them.
inline ValidationSplit validation_split(const MpuDataset& data, std::uint64_t seed,
                                        double fraction = 0.1) {
  if (!data.hidden_labels) throw std::invalid_argument("validation split needs pool labels");
  std::mt19937_64 rng(seed);
  ValidationSplit out;
  out.train.priors = data.sample.priors;
  std::vector<Matrix> val_parts;
  auto split = [&](const Matrix& m, auto&& label_of) {
    std::vector<std::size_t> order(m.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(m.rows())));
    const std::size_t cut = m.rows() - std::min(n_val, m.rows() - 1);
    const std::span<const std::size_t> all(order);
    val_parts.push_back(m.gather(all.subspan(cut)));
    for (std::size_t r : all.subspan(cut)) out.validation.y.push_back(label_of(r));
    return m.gather(all.first(cut));
  };
  for (std::size_t i = 0; i < data.sample.observed.size(); ++i) {
    out.train.observed.push_back(split(data.sample.observed[i], [i](std::size_t) { return i; }));
  }
  const auto& hidden = *data.hidden_labels;
  out.train.pool = split(data.sample.pool, [&](std::size_t r) { return hidden[r]; });
  out.validation.x = vstack(val_parts);
  return out;
}

struct LearningRateChoice {
  double best_rate = 0.0;
  std::vector<std::pair<double, double>> validation_accuracy;  ///< (rate, accuracy)
};

inline LearningRateChoice select_learning_rate(TrainConfig cfg, const MpuDataset& data,
                                               const Architecture& arch,
                                               std::span<const double> rates = kPaperLearningRates) {
  if (rates.empty()) throw std::invalid_argument("learning-rate sweep: no rates");
  const auto split = validation_split(data, cfg.seed);
  LearningRateChoice choice;
  double best = -1.0;
  for (double rate : rates) {
    cfg.learning_rate = rate;
    auto fitted = train(cfg, split.train, init_scorer(arch, cfg.seed));
    const double acc = evaluate(fitted.scorer, split.validation).accuracy;
    choice.validation_accuracy.emplace_back(rate, acc);
    if (acc > best) {
      best = acc;
      choice.best_rate = rate;
    }
  }
  return choice;
}

// ---------------------------------------------------------------------------
// Prior misspecification sweep

enum class SweepScheme { scalar_last, adversarial };
enum class SweepMode { reevaluate, retrain };

inline std::string_view to_string(SweepScheme s) {
  return s == SweepScheme::adversarial ? "adversarial" : "scalar_last";
}

inline std::optional<SweepScheme> parse_sweep_scheme(std::string_view s) {
  if (s == "scalar_last") return SweepScheme::scalar_last;
  if (s == "adversarial") return SweepScheme::adversarial;
  return std::nullopt;
}

/// Supremum bound C_Delta = 2 C used for the theory curve.
inline constexpr double kMisspecConstant = 2.0;

struct SweepPoint {
  double l1_delta = 0.0;
  std::vector<double> delta;  ///< perturbation of the observed priors, sums to 0
  double macro_f1 = 0.0;
  double risk = 0.0;  ///< training objective under the perturbed priors
  double empirical_bound = 0.0;
  double theory_bound = 0.0;
};

struct SweepReport {
  SweepScheme scheme = SweepScheme::scalar_last;
  std::vector<double> b;
  std::vector<SweepPoint> points;
  std::vector<std::string> warnings;  ///< skipped infeasible points
};

struct SweepOptions {
  SweepMode mode = SweepMode::reevaluate;
  TrainConfig retrain;  ///< used in retrain mode; its risk priors are replaced per point
};

/// b_i = mean over P_i of l(f_i) - l(-f_i).
inline std::vector<double> misspecification_bias(const MpuSample& sample, const Scorer& scorer,
                                                 const SurrogateSpec& spec) {
  std::vector<double> b;
  for (std::size_t i = 0; i < sample.observed.size(); ++i) {
    const Matrix scores = scorer.infer(sample.observed[i]);
    if (scores.rows() == 0) throw std::invalid_argument("sweep: empty observed set");
    double sum = 0.0;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      sum += eval_loss(spec, scores(r, i)) - eval_loss(spec, -scores(r, i));
    }
    b.push_back(sum / static_cast<double>(scores.rows()));
  }
  return b;
}

/// Perturbation with l1 norm `magnitude` over the N observed classes.
inline std::vector<double> sweep_delta(SweepScheme scheme, std::span<const double> b, double magnitude) {
  const std::size_t n = b.size();
  std::vector<double> delta(n, 0.0);
  if (n < 2 || magnitude == 0.0) return delta;
  if (scheme == SweepScheme::scalar_last) {
    delta[n - 1] = -magnitude / 2.0;
    for (std::size_t i = 0; i + 1 < n; ++i) delta[i] = magnitude / (2.0 * static_cast<double>(n - 1));
    return delta;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t c) { return std::abs(b[a]) > std::abs(b[c]); });
  const double sign = b[order[0]] >= 0.0 ? 1.0 : -1.0;
  delta[order[0]] = -sign * magnitude / 2.0;
  delta[order[1]] = sign * magnitude / 2.0;
  return delta;
}

inline SweepReport misspecification_sweep(const MpuSample& sample, const Scorer& scorer,
                                          const RiskConfig& risk, const LabeledSet& test,
                                          SweepScheme scheme, std::span<const double> magnitudes,
                                          const SweepOptions& options = {}) {
  sample.validate();
  SweepReport report;
  report.scheme = scheme;
  report.b = misspecification_bias(sample, scorer, risk.surrogate);
  const std::size_t n = report.b.size();
  const double lambda = 1.0 / static_cast<double>(n);
  const double base_f1 = evaluate(scorer, test).macro_f1;

  for (double magnitude : magnitudes) {
    if (!(magnitude >= 0.0)) throw std::invalid_argument("sweep: magnitudes must be >= 0");
    SweepPoint pt;
    pt.l1_delta = magnitude;
    pt.delta = sweep_delta(scheme, report.b, magnitude);
    RiskConfig perturbed = risk;
    bool feasible = true;
    for (std::size_t i = 0; i < n; ++i) {
      perturbed.priors[i] += pt.delta[i];
      feasible = feasible && perturbed.priors[i] >= 0.0 && perturbed.priors[i] <= 1.0;
    }
    if (!feasible) {
      report.warnings.push_back("skipping l1_delta=" + std::to_string(magnitude) +
                                ": perturbed prior leaves [0,1]");
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      pt.empirical_bound += lambda * std::abs(report.b[i]) * std::abs(pt.delta[i]);
      pt.theory_bound += 2.0 * kMisspecConstant * lambda * std::abs(pt.delta[i]);
    }
    if (options.mode == SweepMode::retrain) {
      TrainConfig cfg = options.retrain;
      cfg.risk = perturbed;
      MpuSample resampled = sample;
      resampled.priors = perturbed.priors;
      Scorer fresh = init_scorer(scorer.architecture(), cfg.seed);
      auto fitted = train(cfg, resampled, std::move(fresh));
      pt.macro_f1 = evaluate(fitted.scorer, test).macro_f1;
      pt.risk = scorer_risk(perturbed, resampled, fitted.scorer).total;
    } else {
      pt.macro_f1 = base_f1;
      pt.risk = scorer_risk(perturbed, sample, scorer).total;
    }
    report.points.push_back(std::move(pt));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Constant-sum table

struct LossTableRow {
  SurrogateSpec spec;
  ConstSumReport report;
  std::optional<double> macro_f1;
  std::optional<double> accuracy;
};

/// The nine (family, gamma, sym) rows of the constant-sum diagnostics table.
inline std::vector<SurrogateSpec> loss_table_specs() {
  using F = LossFamily;
  auto make = [](F f, double g, SymClip s) {
    SurrogateSpec spec;
    spec.family = f;
    spec.gamma = g;
    spec.sym_clip = s;
    return spec;
  };
  return {make(F::hinge, 1, SymClip::raw),        make(F::hinge, 1, SymClip::sym),
          make(F::logistic, 1, SymClip::raw),     make(F::ramp, 1, SymClip::raw),
          make(F::ramp, 1, SymClip::sym),         make(F::sigmoid_prob, 1, SymClip::raw),
          make(F::sigmoid_prob, 2, SymClip::raw), make(F::tanh_smooth, 1, SymClip::raw),
          make(F::unhinged, 1, SymClip::raw)};
}

inline std::vector<LossTableRow> reproduce_loss_table(double grid_lo = -10.0, double grid_hi = 10.0,
                                                      std::size_t points = 2001) {
  std::vector<LossTableRow> rows;
  for (const auto& spec : loss_table_specs()) {
    rows.push_back({spec, constant_sum_check(spec, grid_lo, grid_hi, points), std::nullopt,
                    std::nullopt});
  }
  return rows;
}

}  // namespace csmpu
