#pragma once

// Glue between the scorer and the risk estimators: scores every set of an
// MPU sample in one pass and pulls the score gradient back to parameters.

#include <cstddef>
#include <vector>

#include "csmpu/data.hpp"
#include "csmpu/model.hpp"
#include "csmpu/risk.hpp"

namespace csmpu {

namespace detail {

inline std::vector<std::size_t> set_sizes(const MpuSample& s) {
  std::vector<std::size_t> sizes;
  for (const auto& m : s.observed) sizes.push_back(m.rows());
  sizes.push_back(s.pool.rows());
  return sizes;
}

inline SetScores split_rows(const Matrix& stacked, const std::vector<std::size_t>& sizes) {
  SetScores out;
  std::size_t at = 0;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    out.observed.push_back(stacked.slice(at, at + sizes[i]));
    at += sizes[i];
  }
  out.pool = stacked.slice(at, at + sizes.back());
  return out;
}

inline Matrix stack_scores(const SetScores& s) {
  std::vector<Matrix> parts = s.observed;
  parts.push_back(s.pool);
  return vstack(parts);
}

}  // namespace detail

/// Risk of a scorer on a sample, scored in inference mode.
inline RiskReport scorer_risk(const RiskConfig& cfg, const MpuSample& sample, const Scorer& scorer) {
  const auto scores = detail::split_rows(scorer.infer(training_rows(sample)), detail::set_sizes(sample));
  return evaluate_risk(cfg, scores).report;
}

struct RiskGradient {
  RiskReport report;
  std::vector<double> gradient;  ///< d total / d parameters
};

/// Value and parameter gradient of the configured estimator on one batch.
/// All sets go through a single train-mode forward, so batch-norm statistics
/// are shared across them. Running statistics change only when
/// `update_stats` is set.
inline RiskGradient risk_gradient_terms(const RiskConfig& cfg, const MpuSample& batch, Scorer& scorer,
                                        bool update_stats = false) {
  const auto sizes = detail::set_sizes(batch);
  ForwardCache cache;
  const Matrix scores = scorer.forward(training_rows(batch), Mode::train, &cache, update_stats);
  auto eval = evaluate_risk(cfg, detail::split_rows(scores, sizes), true);
  RiskGradient out;
  out.gradient = scorer.backward(cache, detail::stack_scores(eval.score_gradient));
  out.report = std::move(eval.report);
  return out;
}

}  // namespace csmpu
