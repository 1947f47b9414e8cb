#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csmpu/matrix.hpp"

namespace csmpu {

/// Layer widths: input d, hidden widths..., output k. An architecture with
/// no hidden widths is a linear scorer.
struct Architecture {
  std::vector<std::size_t> widths;
  bool batch_norm = true;

  std::size_t input_dim() const { return widths.front(); }
  std::size_t output_dim() const { return widths.back(); }
  std::size_t hidden_layers() const { return widths.size() - 2; }

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("architecture: need input and output widths");
    for (std::size_t w : widths) {
      if (w == 0) throw std::invalid_argument("architecture: zero-width layer");
    }
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Default desk-scale network d -> 64 -> 64 -> k.
inline Architecture default_mlp(std::size_t d, std::size_t k) { return {{d, 64, 64, k}, true}; }

inline Architecture linear_architecture(std::size_t d, std::size_t k) { return {{d, k}, false}; }

enum class Mode { train, infer };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Activations kept by a train-mode forward pass for backpropagation.
struct ForwardCache {
  std::vector<Matrix> inputs;       ///< input to each affine layer
  std::vector<Matrix> pre_relu;     ///< hidden affine outputs
  std::vector<Matrix> normalized;   ///< hidden BN inputs after standardization
  std::vector<std::vector<double>> inv_std;
  Mode mode = Mode::train;
};

/// Feed-forward scorer x -> (f_1(x), ..., f_k(x)). Hidden layers are
/// affine -> ReLU -> batch norm; the output layer is affine.
///
/// Parameter layout, layer by layer: W (out x in, row-major), b (out), then
/// for hidden layers with batch norm gamma (out), beta (out).
class Scorer {
 public:
  struct LayerOffsets {
    std::size_t weight = 0, bias = 0, gamma = 0, beta = 0;
    std::size_t in = 0, out = 0;
    bool hidden = false;
  };

  Scorer() = default;

  /// All parameters zero except batch-norm scales, which start at 1.
  explicit Scorer(Architecture arch, std::uint64_t seed = 0)
      : arch_(std::move(arch)), seed_(seed) {
    arch_.validate();
    std::size_t at = 0;
    const std::size_t n_layers = arch_.widths.size() - 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
      LayerOffsets off;
      off.in = arch_.widths[l];
      off.out = arch_.widths[l + 1];
      off.hidden = l + 1 < n_layers;
      off.weight = at;
      at += off.in * off.out;
      off.bias = at;
      at += off.out;
      if (off.hidden && arch_.batch_norm) {
        off.gamma = at;
        at += off.out;
        off.beta = at;
        at += off.out;
      }
      layers_.push_back(off);
    }
    params_.assign(at, 0.0);
    for (const auto& off : layers_) {
      if (off.hidden && arch_.batch_norm) {
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off.gamma), off.out, 1.0);
        running_mean_.emplace_back(off.out, 0.0);
        running_var_.emplace_back(off.out, 1.0);
      }
    }
  }

  const Architecture& architecture() const noexcept { return arch_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t input_dim() const { return arch_.input_dim(); }
  std::size_t output_dim() const { return arch_.output_dim(); }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }
  std::span<const LayerOffsets> layers() const noexcept { return layers_; }

  std::vector<std::vector<double>>& running_mean() noexcept { return running_mean_; }
  std::vector<std::vector<double>>& running_var() noexcept { return running_var_; }
  const std::vector<std::vector<double>>& running_mean() const noexcept { return running_mean_; }
  const std::vector<std::vector<double>>& running_var() const noexcept { return running_var_; }

  /// Inference with frozen batch-norm statistics.
  Matrix infer(const Matrix& x) const {
    check_input(x);
    Matrix h = x;
    std::size_t bn = 0;
    for (const auto& off : layers_) {
      Matrix a = affine(h, off);
      if (!off.hidden) return a;
      relu_inplace(a);
      if (arch_.batch_norm) {
        const auto& mean = running_mean_[bn];
        const auto& var = running_var_[bn];
        for (std::size_t r = 0; r < a.rows(); ++r) {
          auto row = a.row(r);
          for (std::size_t j = 0; j < off.out; ++j) {
            const double xhat = (row[j] - mean[j]) / std::sqrt(var[j] + kBatchNormEps);
            row[j] = params_[off.gamma + j] * xhat + params_[off.beta + j];
          }
        }
        ++bn;
      }
      h = std::move(a);
    }
    return h;
  }

  /// Forward pass in either mode. Train mode normalizes with batch
  /// statistics, records activations into `cache` when given, and folds the
  /// batch statistics into the running averages when `update_stats` is set.
  Matrix forward(const Matrix& x, Mode mode, ForwardCache* cache = nullptr,
                 bool update_stats = true) {
    if (mode == Mode::infer) {
      if (cache) throw std::invalid_argument("forward: cache is only filled in train mode");
      return infer(x);
    }
    check_input(x);
    if (arch_.batch_norm && arch_.hidden_layers() > 0 && x.rows() < 2) {
      throw std::invalid_argument("forward: train-mode batch norm needs a batch of at least 2");
    }
    if (cache) *cache = ForwardCache{};
    Matrix h = x;
    std::size_t bn = 0;
    for (const auto& off : layers_) {
      if (cache) cache->inputs.push_back(h);
      Matrix a = affine(h, off);
      if (!off.hidden) return a;
      if (cache) cache->pre_relu.push_back(a);
      relu_inplace(a);
      if (arch_.batch_norm) {
        const std::size_t n = a.rows();
        std::vector<double> mean(off.out, 0.0), var(off.out, 0.0), inv_std(off.out);
        for (std::size_t r = 0; r < n; ++r) {
          auto row = a.row(r);
          for (std::size_t j = 0; j < off.out; ++j) mean[j] += row[j];
        }
        for (double& m : mean) m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          auto row = a.row(r);
          for (std::size_t j = 0; j < off.out; ++j) {
            const double d = row[j] - mean[j];
            var[j] += d * d;
          }
        }
        for (std::size_t j = 0; j < off.out; ++j) {
          var[j] /= static_cast<double>(n);
          inv_std[j] = 1.0 / std::sqrt(var[j] + kBatchNormEps);
        }
        Matrix xhat(n, off.out);
        for (std::size_t r = 0; r < n; ++r) {
          auto row = a.row(r);
          auto xr = xhat.row(r);
          for (std::size_t j = 0; j < off.out; ++j) {
            xr[j] = (row[j] - mean[j]) * inv_std[j];
            row[j] = params_[off.gamma + j] * xr[j] + params_[off.beta + j];
          }
        }
        if (update_stats) {
          const double unbiased = static_cast<double>(n) / static_cast<double>(n - 1);
          for (std::size_t j = 0; j < off.out; ++j) {
            running_mean_[bn][j] =
                (1.0 - kBatchNormMomentum) * running_mean_[bn][j] + kBatchNormMomentum * mean[j];
            running_var_[bn][j] = (1.0 - kBatchNormMomentum) * running_var_[bn][j] +
                                  kBatchNormMomentum * var[j] * unbiased;
          }
        }
        if (cache) {
          cache->normalized.push_back(std::move(xhat));
          cache->inv_std.push_back(std::move(inv_std));
        }
        ++bn;
      }
      h = std::move(a);
    }
    return h;
  }

  /// Gradient of sum_n <upstream_n, f(x_n)> with respect to the parameters,
  /// using the activations of the train-mode pass that filled `cache`.
  /// The ReLU subgradient at 0 is 0.
  std::vector<double> backward(const ForwardCache& cache, const Matrix& upstream) const {
    if (cache.inputs.size() != layers_.size()) {
      throw std::invalid_argument("backward: cache does not match this scorer");
    }
    const std::size_t n = cache.inputs.front().rows();
    if (upstream.rows() != n || upstream.cols() != output_dim()) {
      throw std::invalid_argument("backward: upstream shape mismatch");
    }
    std::vector<double> grad(params_.size(), 0.0);
    Matrix delta = upstream;  // d objective / d (output of current layer)
    std::size_t bn = cache.normalized.size();
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& off = layers_[l];
      if (off.hidden) {
        if (arch_.batch_norm) {
          --bn;
          delta = batch_norm_backward(off, cache.normalized[bn], cache.inv_std[bn], delta, grad);
        }
        const Matrix& pre = cache.pre_relu[l];
        for (std::size_t r = 0; r < n; ++r) {
          auto d = delta.row(r);
          auto p = pre.row(r);
          for (std::size_t j = 0; j < off.out; ++j) {
            if (!(p[j] > 0.0)) d[j] = 0.0;
          }
        }
      }
      const Matrix& input = cache.inputs[l];
      for (std::size_t r = 0; r < n; ++r) {
        auto d = delta.row(r);
        auto xin = input.row(r);
        for (std::size_t o = 0; o < off.out; ++o) {
          const double g = d[o];
          if (g == 0.0) continue;
          grad[off.bias + o] += g;
          double* wg = grad.data() + off.weight + o * off.in;
          for (std::size_t i = 0; i < off.in; ++i) wg[i] += g * xin[i];
        }
      }
      if (l == 0) break;
      Matrix next(n, off.in);
      for (std::size_t r = 0; r < n; ++r) {
        auto d = delta.row(r);
        auto out = next.row(r);
        for (std::size_t o = 0; o < off.out; ++o) {
          const double g = d[o];
          if (g == 0.0) continue;
          const double* w = params_.data() + off.weight + o * off.in;
          for (std::size_t i = 0; i < off.in; ++i) out[i] += g * w[i];
        }
      }
      delta = std::move(next);
    }
    return grad;
  }

 private:
  void check_input(const Matrix& x) const {
    if (x.cols() != input_dim()) {
      throw std::invalid_argument("scorer: input width " + std::to_string(x.cols()) +
                                  " != " + std::to_string(input_dim()));
    }
  }

  Matrix affine(const Matrix& x, const LayerOffsets& off) const {
    Matrix out(x.rows(), off.out);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xin = x.row(r);
      auto y = out.row(r);
      for (std::size_t o = 0; o < off.out; ++o) {
        const double* w = params_.data() + off.weight + o * off.in;
        double acc = params_[off.bias + o];
        for (std::size_t i = 0; i < off.in; ++i) acc += w[i] * xin[i];
        y[o] = acc;
      }
    }
    return out;
  }

  static void relu_inplace(Matrix& a) {
    for (double& v : a.data()) v = v > 0.0 ? v : 0.0;
  }

  Matrix batch_norm_backward(const LayerOffsets& off, const Matrix& xhat,
                             const std::vector<double>& inv_std, const Matrix& dy,
                             std::vector<double>& grad) const {
    const std::size_t n = xhat.rows();
    std::vector<double> sum_dy(off.out, 0.0), sum_dy_xhat(off.out, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      auto d = dy.row(r);
      auto xr = xhat.row(r);
      for (std::size_t j = 0; j < off.out; ++j) {
        sum_dy[j] += d[j];
        sum_dy_xhat[j] += d[j] * xr[j];
      }
    }
    for (std::size_t j = 0; j < off.out; ++j) {
      grad[off.gamma + j] += sum_dy_xhat[j];
      grad[off.beta + j] += sum_dy[j];
    }
    const double nn = static_cast<double>(n);
    Matrix dx(n, off.out);
    for (std::size_t r = 0; r < n; ++r) {
      auto d = dy.row(r);
      auto xr = xhat.row(r);
      auto out = dx.row(r);
      for (std::size_t j = 0; j < off.out; ++j) {
        const double g = params_[off.gamma + j];
        out[j] = g * inv_std[j] / nn * (nn * d[j] - sum_dy[j] - xr[j] * sum_dy_xhat[j]);
      }
    }
    return dx;
  }

  Architecture arch_;
  std::uint64_t seed_ = 0;
  std::vector<LayerOffsets> layers_;
  std::vector<double> params_;
  std::vector<std::vector<double>> running_mean_;
  std::vector<std::vector<double>> running_var_;
};

/// He-normal weights (std sqrt(2 / fan_in)), zero biases, unit BN scales.
inline Scorer init_scorer(const Architecture& arch, std::uint64_t seed) {
  Scorer s(arch, seed);
  std::mt19937_64 rng(seed);
  auto params = s.parameters();
  for (const auto& off : s.layers()) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(off.in)));
    for (std::size_t i = 0; i < off.in * off.out; ++i) params[off.weight + i] = normal(rng);
  }
  return s;
}

/// Compares `analytic` against central differences of `objective` on
/// `n_probes` coordinates drawn at random (without replacement when
/// possible). `params` is perturbed in place and restored. Returns the
/// largest |a - n| / max(|a|, |n|, floor).
inline double grad_check(std::span<double> params, std::span<const double> analytic,
                         const std::function<double()>& objective, std::size_t n_probes,
                         std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
  if (params.size() != analytic.size()) throw std::invalid_argument("grad_check: size mismatch");
  if (params.empty()) return 0.0;
  std::vector<std::size_t> coords(params.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (n_probes < coords.size()) coords.resize(n_probes);

  double worst = 0.0;
  for (std::size_t c : coords) {
    const double saved = params[c];
    params[c] = saved + h;
    const double up = objective();
    params[c] = saved - h;
    const double down = objective();
    params[c] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
  }
  return worst;
}

}  // namespace csmpu
