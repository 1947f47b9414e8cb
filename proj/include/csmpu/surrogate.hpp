#pragma once

// Binary margin losses l(z) for the one-vs-rest decomposition, their
// symmetrized-and-clipped variants, and a numerical probe of the identity
// l(z) + l(-z) = C that the unbiased MPU risk relies on.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace csmpu {

enum class LossFamily { unhinged, sigmoid_prob, tanh_smooth, hinge, ramp, logistic };
enum class SymClip { raw, sym };

inline constexpr std::array<LossFamily, 6> kAllFamilies = {
    LossFamily::unhinged, LossFamily::sigmoid_prob, LossFamily::tanh_smooth,
    LossFamily::hinge,    LossFamily::ramp,         LossFamily::logistic};

inline std::string_view to_string(LossFamily f) {
  switch (f) {
    case LossFamily::unhinged: return "unhinged";
    case LossFamily::sigmoid_prob: return "sigmoid_prob";
    case LossFamily::tanh_smooth: return "tanh_smooth";
    case LossFamily::hinge: return "hinge";
    case LossFamily::ramp: return "ramp";
    case LossFamily::logistic: return "logistic";
  }
  return "?";
}

inline std::string_view to_string(SymClip s) { return s == SymClip::sym ? "sym" : "raw"; }

inline std::optional<LossFamily> parse_loss_family(std::string_view name) {
  for (auto f : kAllFamilies) {
    if (to_string(f) == name) return f;
  }
  return std::nullopt;
}

inline std::optional<SymClip> parse_sym_clip(std::string_view name) {
  if (name == "raw") return SymClip::raw;
  if (name == "sym") return SymClip::sym;
  return std::nullopt;
}

struct SurrogateSpec {
  LossFamily family = LossFamily::sigmoid_prob;
  double gamma = 1.0;
  SymClip sym_clip = SymClip::raw;
  double constant_sum = 1.0;

  void validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
      throw std::invalid_argument("surrogate: gamma must be positive, got " + std::to_string(gamma));
    }
  }

  friend bool operator==(const SurrogateSpec&, const SurrogateSpec&) = default;
};

/// True when l(z) + l(-z) = C holds analytically without symmetrization.
inline bool satisfies_constant_sum(const SurrogateSpec& spec) {
  if (spec.sym_clip == SymClip::sym) return true;
  return spec.family == LossFamily::unhinged || spec.family == LossFamily::sigmoid_prob ||
         spec.family == LossFamily::tanh_smooth;
}

/// True when the loss takes values in [0, C] for every margin.
inline bool has_bounded_range(const SurrogateSpec& spec) {
  if (spec.sym_clip == SymClip::sym) return true;
  return spec.family == LossFamily::sigmoid_prob || spec.family == LossFamily::tanh_smooth ||
         spec.family == LossFamily::ramp;
}

namespace detail {

template <std::floating_point T>
T raw_loss(LossFamily family, T gamma, T z) {
  const T one(1);
  const T half(0.5);
  switch (family) {
    case LossFamily::unhinged: return (one - z) * half;
    case LossFamily::sigmoid_prob: return one / (one + std::exp(gamma * z));
    case LossFamily::tanh_smooth: return (one - std::tanh(gamma * z)) * half;
    case LossFamily::hinge: return std::max(T(0), one - z);
    case LossFamily::ramp: return std::min(one, std::max(T(0), one - z));
    case LossFamily::logistic: {
      // softplus(-gamma z) without overflow
      const T t = -gamma * z;
      return std::max(t, T(0)) + std::log1p(std::exp(-std::abs(t)));
    }
  }
  return T(0);
}

template <std::floating_point T>
T raw_derivative(LossFamily family, T gamma, T z) {
  const T one(1);
  switch (family) {
    case LossFamily::unhinged: return T(-0.5);
    case LossFamily::sigmoid_prob: {
      const T s = one / (one + std::exp(gamma * z));  // sigma(-gamma z)
      return -gamma * s * (one - s);
    }
    case LossFamily::tanh_smooth: {
      const T t = std::tanh(gamma * z);
      return -gamma * (one - t * t) * T(0.5);
    }
    case LossFamily::hinge: return z < one ? -one : T(0);
    case LossFamily::ramp: return (z > T(0) && z < one) ? -one : T(0);
    case LossFamily::logistic: {
      const T s = one / (one + std::exp(gamma * z));
      return -gamma * s;
    }
  }
  return T(0);
}

}  // namespace detail

/// l(z) for the spec. For sym_clip=sym this is (l(z) - l(-z))/2 + C/2 clipped
/// to [0, C]; the half with the larger value is computed directly and the
/// other half as its complement, so l(z) + l(-z) == C holds bit-exactly.
template <std::floating_point T = double>
T eval_loss(const SurrogateSpec& spec, T z) {
  if (!std::isfinite(z)) throw std::domain_error("eval_loss: non-finite margin");
  const T gamma = static_cast<T>(spec.gamma);
  if (spec.sym_clip == SymClip::raw) return detail::raw_loss<T>(spec.family, gamma, z);

  const T c = static_cast<T>(spec.constant_sum);
  const T half_gap = (detail::raw_loss<T>(spec.family, gamma, z) -
                      detail::raw_loss<T>(spec.family, gamma, -z)) /
                     T(2);
  auto clipped = [&](T gap) { return std::clamp(c / T(2) + gap, T(0), c); };
  if (half_gap >= T(0)) return clipped(half_gap);
  return c - clipped(-half_gap);
}

/// dl/dz. Kinks take the subgradient 0: hinge at z=1, ramp at z=0 and z=1,
/// and sym variants wherever the clip is active.
template <std::floating_point T = double>
T loss_derivative(const SurrogateSpec& spec, T z) {
  if (!std::isfinite(z)) throw std::domain_error("loss_derivative: non-finite margin");
  const T gamma = static_cast<T>(spec.gamma);
  if (spec.sym_clip == SymClip::raw) return detail::raw_derivative<T>(spec.family, gamma, z);

  const T c = static_cast<T>(spec.constant_sum);
  const T interior = c / T(2) + (detail::raw_loss<T>(spec.family, gamma, z) -
                                 detail::raw_loss<T>(spec.family, gamma, -z)) /
                                    T(2);
  if (interior <= T(0) || interior >= c) return T(0);
  return (detail::raw_derivative<T>(spec.family, gamma, z) +
          detail::raw_derivative<T>(spec.family, gamma, -z)) /
         T(2);
}

inline SurrogateSpec symmetrize(SurrogateSpec spec) {
  spec.sym_clip = SymClip::sym;
  return spec;
}

struct ConstSumReport {
  double max_residual = 0.0;
  double p99_residual = 0.0;
  double grid_lo = 0.0;
  double grid_hi = 0.0;
  std::size_t grid_points = 0;
};

/// q-quantile with linear interpolation between order statistics.
inline double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Residuals |l(z) + l(-z) - C| on a uniform grid, evaluated in precision T.
template <std::floating_point T = double>
ConstSumReport constant_sum_check(const SurrogateSpec& spec, double grid_lo, double grid_hi,
                                  std::size_t n_points) {
  spec.validate();
  if (!(grid_lo < grid_hi)) throw std::invalid_argument("constant_sum_check: grid_lo >= grid_hi");
  if (n_points < 2) throw std::invalid_argument("constant_sum_check: need at least 2 points");

  std::vector<double> residuals(n_points);
  const double step = (grid_hi - grid_lo) / static_cast<double>(n_points - 1);
  const T c = static_cast<T>(spec.constant_sum);
  for (std::size_t i = 0; i < n_points; ++i) {
    const T z = static_cast<T>(grid_lo + step * static_cast<double>(i));
    const T sum = eval_loss<T>(spec, z) + eval_loss<T>(spec, -z);
    residuals[i] = static_cast<double>(std::abs(sum - c));
  }
  ConstSumReport report;
  report.max_residual = *std::max_element(residuals.begin(), residuals.end());
  report.p99_residual = quantile_linear(std::move(residuals), 0.99);
  report.grid_lo = grid_lo;
  report.grid_hi = grid_hi;
  report.grid_points = n_points;
  return report;
}

}  // namespace csmpu
