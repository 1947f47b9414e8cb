#pragma once

// MPU datasets: the estimator-facing sample (labeled observed-class sets plus
// an unlabeled pool) is kept in its own type, separate from the hidden pool
// labels that only oracles and metrics may read.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csmpu/matrix.hpp"
#include "csmpu/risk.hpp"

namespace csmpu {

/// What estimators see: k-1 labeled sets, the pool, and the class priors.
struct MpuSample {
  std::vector<Matrix> observed;
  Matrix pool;
  std::vector<double> priors;

  std::size_t k() const noexcept { return priors.size(); }
  std::size_t feature_dim() const noexcept { return pool.cols(); }

  void validate() const {
    validate_priors(priors);
    if (observed.size() + 1 != priors.size()) {
      throw std::invalid_argument("mpu sample: expected k-1 observed sets");
    }
    for (std::size_t i = 0; i < observed.size(); ++i) {
      if (observed[i].cols() != pool.cols()) {
        throw std::invalid_argument("mpu sample: observed set " + std::to_string(i) +
                                    " has a different feature dimension");
      }
    }
  }
};

struct MpuDataset {
  MpuSample sample;
  /// True class index (0..k-1) of every pool row, when known.
  std::optional<std::vector<std::size_t>> hidden_labels;

  const MpuSample& view() const noexcept { return sample; }
  std::size_t k() const noexcept { return sample.k(); }
  std::size_t feature_dim() const noexcept { return sample.feature_dim(); }
};

/// Features with class indices in 0..k-1 (k-1 is the meta-class).
struct LabeledSet {
  Matrix x;
  std::vector<std::size_t> y;
};

/// Raw labeled source data as loaded from disk.
struct LabeledData {
  Matrix x;
  std::vector<int> labels;
};

// ---------------------------------------------------------------------------
// Synthetic 2-D Gaussian family

/// Class means on a regular k-gon of the given circumradius.
inline std::vector<std::array<double, 2>> polygon_means(std::size_t k, double separation) {
  std::vector<std::array<double, 2>> means(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
    means[c] = {separation * std::cos(angle), separation * std::sin(angle)};
  }
  return means;
}

struct SyntheticFamily {
  std::size_t k = 4;
  std::vector<double> priors;
  double separation = 3.0;
  double sigma = 1.0;

  void validate() const {
    if (k < 2) throw std::invalid_argument("synthetic: k must be >= 2");
    if (priors.size() != k) throw std::invalid_argument("synthetic: need k priors");
    validate_priors(priors);
    if (!(separation > 0.0)) throw std::invalid_argument("synthetic: separation must be > 0");
    if (!(sigma > 0.0)) throw std::invalid_argument("synthetic: sigma must be > 0");
  }
};

/// Priors with pi_k for the meta-class and the rest split evenly.
inline std::vector<double> uniform_observed_priors(std::size_t k, double pi_k) {
  std::vector<double> p(k, (1.0 - pi_k) / static_cast<double>(k - 1));
  p.back() = pi_k;
  return p;
}

namespace detail {

inline void draw_gaussian_rows(Matrix& out, std::size_t first, std::size_t count,
                               const std::array<double, 2>& mean, double sigma,
                               std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  for (std::size_t r = first; r < first + count; ++r) {
    out(r, 0) = mean[0] + normal(rng);
    out(r, 1) = mean[1] + normal(rng);
  }
}

}  // namespace detail

/// Labeled draws from the prior mixture of the synthetic family.
inline LabeledSet sample_mixture(const SyntheticFamily& fam, std::size_t n, std::mt19937_64& rng) {
  fam.validate();
  const auto means = polygon_means(fam.k, fam.separation);
  std::discrete_distribution<std::size_t> pick(fam.priors.begin(), fam.priors.end());
  LabeledSet out{Matrix(n, 2), std::vector<std::size_t>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    out.y[r] = pick(rng);
    detail::draw_gaussian_rows(out.x, r, 1, means[out.y[r]], fam.sigma, rng);
  }
  return out;
}

/// MPU draw from the synthetic family: n_labeled_per_class points from each
/// observed class and an unlabeled pool from the full prior mixture.
inline MpuDataset gen_synthetic(const SyntheticFamily& fam, std::size_t n_labeled_per_class,
                                std::size_t n_unlabeled, std::mt19937_64& rng) {
  fam.validate();
  const auto means = polygon_means(fam.k, fam.separation);
  MpuDataset ds;
  ds.sample.priors = fam.priors;
  for (std::size_t c = 0; c + 1 < fam.k; ++c) {
    Matrix set(n_labeled_per_class, 2);
    detail::draw_gaussian_rows(set, 0, n_labeled_per_class, means[c], fam.sigma, rng);
    ds.sample.observed.push_back(std::move(set));
  }
  LabeledSet pool = sample_mixture(fam, n_unlabeled, rng);
  ds.sample.pool = std::move(pool.x);
  ds.hidden_labels = std::move(pool.y);
  return ds;
}

inline MpuDataset gen_synthetic(std::size_t k, std::vector<double> priors,
                                std::size_t n_labeled_per_class, std::size_t n_unlabeled,
                                double separation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gen_synthetic(SyntheticFamily{k, std::move(priors), separation, 1.0},
                       n_labeled_per_class, n_unlabeled, rng);
}

// ---------------------------------------------------------------------------
// Split protocol for labeled source data

/// Maps raw labels onto class indices: the first k-1 distinct labels in
/// ascending order are observed classes 0..k-2, everything else is k-1.
class ClassMapping {
 public:
  ClassMapping() = default;
  ClassMapping(std::span<const int> labels, std::size_t k) : k_(k) {
    std::vector<int> distinct(labels.begin(), labels.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < k) {
      throw std::invalid_argument("split: source has " + std::to_string(distinct.size()) +
                                  " classes, need at least k=" + std::to_string(k));
    }
    observed_.assign(distinct.begin(), distinct.begin() + static_cast<std::ptrdiff_t>(k - 1));
  }

  std::size_t operator()(int label) const {
    auto it = std::find(observed_.begin(), observed_.end(), label);
    return it == observed_.end() ? k_ - 1 : static_cast<std::size_t>(it - observed_.begin());
  }

  std::span<const int> observed_labels() const noexcept { return observed_; }
  std::size_t k() const noexcept { return k_; }

  LabeledSet apply(const LabeledData& data) const {
    LabeledSet out{data.x, std::vector<std::size_t>(data.labels.size())};
    for (std::size_t i = 0; i < data.labels.size(); ++i) out.y[i] = (*this)(data.labels[i]);
    return out;
  }

 private:
  std::size_t k_ = 0;
  std::vector<int> observed_;
};

struct SplitParams {
  std::size_t k = 4;
  double pi_k = 0.5;
  double labeled_fraction = 0.5;
  std::uint64_t seed = 0;
};

/// Builds an MPU dataset from fully labeled data: observed classes keep
/// `labeled_fraction` of their samples as labeled sets and send the rest to
/// the pool; all remaining classes form the meta-class and go to the pool.
/// Whichever pool side is over-represented is subsampled so the meta-class
/// fraction matches pi_k; labeled sets are never touched.
inline MpuDataset mpu_split(const LabeledData& source, const SplitParams& p) {
  if (!(p.pi_k > 0.0 && p.pi_k < 1.0)) throw std::invalid_argument("split: pi_k must be in (0,1)");
  if (!(p.labeled_fraction > 0.0 && p.labeled_fraction <= 1.0)) {
    throw std::invalid_argument("split: labeled_fraction must be in (0,1]");
  }
  if (p.k < 2) throw std::invalid_argument("split: k must be >= 2");
  if (source.labels.size() != source.x.rows()) {
    throw std::invalid_argument("split: label count != row count");
  }
  const ClassMapping map(source.labels, p.k);
  std::mt19937_64 rng(p.seed);

  std::vector<std::vector<std::size_t>> by_class(p.k);
  for (std::size_t r = 0; r < source.labels.size(); ++r) by_class[map(source.labels[r])].push_back(r);

  MpuDataset ds;
  std::vector<std::size_t> observed_origin;  // source rows
  for (std::size_t c = 0; c + 1 < p.k; ++c) {
    auto& rows = by_class[c];
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_lab = static_cast<std::size_t>(
        std::llround(p.labeled_fraction * static_cast<double>(rows.size())));
    if (n_lab == 0) {
      throw std::invalid_argument("split: observed class " + std::to_string(c) +
                                  " ends up with no labeled samples");
    }
    ds.sample.observed.push_back(source.x.gather(std::span(rows).first(n_lab)));
    observed_origin.insert(observed_origin.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_lab),
                           rows.end());
  }
  std::vector<std::size_t> meta = by_class[p.k - 1];
  std::shuffle(meta.begin(), meta.end(), rng);
  std::shuffle(observed_origin.begin(), observed_origin.end(), rng);

  const double n_obs = static_cast<double>(observed_origin.size());
  const double n_meta = static_cast<double>(meta.size());
  if (n_meta / (n_obs + n_meta) > p.pi_k) {
    const auto keep = static_cast<std::size_t>(std::llround(p.pi_k * n_obs / (1.0 - p.pi_k)));
    meta.resize(keep);
  } else {
    const auto keep = static_cast<std::size_t>(std::llround(n_meta * (1.0 - p.pi_k) / p.pi_k));
    observed_origin.resize(keep);
  }
  if (meta.empty() || observed_origin.empty()) {
    const double have = static_cast<double>(by_class[p.k - 1].size());
    const auto needed =
        static_cast<long long>(std::ceil(0.5 * p.pi_k / (1.0 - p.pi_k) - 1e-12));
    throw std::invalid_argument(
        "split: cannot reach pi_k=" + std::to_string(p.pi_k) + " with " +
        std::to_string(static_cast<long long>(have)) + " meta-class and " +
        std::to_string(static_cast<long long>(n_obs)) +
        " observed-origin pool samples; need at least " + std::to_string(std::max(needed, 1LL)) +
        " meta-class samples, short by " +
        std::to_string(std::max(1LL, needed - static_cast<long long>(have))));
  }

  std::vector<std::size_t> pool_rows = observed_origin;
  pool_rows.insert(pool_rows.end(), meta.begin(), meta.end());
  std::shuffle(pool_rows.begin(), pool_rows.end(), rng);
  ds.sample.pool = source.x.gather(pool_rows);
  std::vector<std::size_t> hidden(pool_rows.size());
  std::vector<double> counts(p.k, 0.0);
  for (std::size_t i = 0; i < pool_rows.size(); ++i) {
    hidden[i] = map(source.labels[pool_rows[i]]);
    counts[hidden[i]] += 1.0;
  }
  ds.hidden_labels = std::move(hidden);

  ds.sample.priors.assign(p.k, 0.0);
  ds.sample.priors.back() = p.pi_k;
  const double obs_total = static_cast<double>(observed_origin.size());
  for (std::size_t c = 0; c + 1 < p.k; ++c) {
    ds.sample.priors[c] = (1.0 - p.pi_k) * counts[c] / obs_total;
  }
  return ds;
}

/// Random split of labeled data into (train, test).
inline std::pair<LabeledData, LabeledData> train_test_split(const LabeledData& data,
                                                            double test_fraction,
                                                            std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("train_test_split: fraction must be in (0,1)");
  }
  std::vector<std::size_t> idx(data.labels.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test =
      static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
  auto take = [&](std::span<const std::size_t> rows) {
    LabeledData out{data.x.gather(rows), {}};
    for (auto r : rows) out.labels.push_back(data.labels[r]);
    return out;
  };
  return {take(std::span(idx).subspan(n_test)), take(std::span(idx).first(n_test))};
}

// ---------------------------------------------------------------------------
// Min-max normalization

struct NormStats {
  std::vector<double> min;
  std::vector<double> max;
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline NormStats minmax_fit(const Matrix& train) {
  if (train.rows() == 0) throw std::invalid_argument("minmax_fit: empty training matrix");
  NormStats s;
  auto first = train.row(0);
  s.min.assign(first.begin(), first.end());
  s.max.assign(first.begin(), first.end());
  for (std::size_t r = 1; r < train.rows(); ++r) {
    auto row = train.row(r);
    for (std::size_t j = 0; j < train.cols(); ++j) {
      s.min[j] = std::min(s.min[j], row[j]);
      s.max[j] = std::max(s.max[j], row[j]);
    }
  }
  return s;
}

/// (x - min) / (max - min) per feature; constant features map to 0 and
/// values outside the training range are not clipped.
inline Matrix minmax_apply(const NormStats& s, const Matrix& x) {
  if (x.cols() != s.min.size()) throw std::invalid_argument("minmax_apply: width mismatch");
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < out.cols(); ++j) {
      const double range = s.max[j] - s.min[j];
      row[j] = range > 0.0 ? (row[j] - s.min[j]) / range : 0.0;
    }
  }
  return out;
}

inline MpuSample minmax_apply(const NormStats& s, const MpuSample& sample) {
  MpuSample out;
  out.priors = sample.priors;
  for (const auto& m : sample.observed) out.observed.push_back(minmax_apply(s, m));
  out.pool = minmax_apply(s, sample.pool);
  return out;
}

/// Training matrix of an MPU sample: every labeled row and every pool row.
inline Matrix training_rows(const MpuSample& sample) {
  std::vector<Matrix> parts = sample.observed;
  parts.push_back(sample.pool);
  return vstack(parts);
}

}  // namespace csmpu
