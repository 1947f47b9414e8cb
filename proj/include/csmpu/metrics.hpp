#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "csmpu/data.hpp"
#include "csmpu/matrix.hpp"
#include "csmpu/model.hpp"

namespace csmpu {

using CountMatrix = std::vector<std::vector<std::size_t>>;

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  CountMatrix confusion;  ///< confusion[true][predicted]
};

/// argmax over one score row; ties go to the lowest index.
inline std::size_t predict_row(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return best;
}

/// Classes with no support in either truth or prediction get F1 = 0.
inline Metrics metrics_from_confusion(const CountMatrix& confusion) {
  const std::size_t k = confusion.size();
  Metrics m;
  m.confusion = confusion;
  m.per_class_f1.assign(k, 0.0);
  std::size_t total = 0, correct = 0;
  for (std::size_t t = 0; t < k; ++t) {
    if (confusion[t].size() != k) throw std::invalid_argument("confusion matrix must be square");
    for (std::size_t p = 0; p < k; ++p) total += confusion[t][p];
    correct += confusion[t][t];
  }
  if (total == 0) throw std::invalid_argument("metrics: empty test set");
  m.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += confusion[o][c];
      fn += confusion[c][o];
    }
    const double tp2 = 2.0 * static_cast<double>(confusion[c][c]);
    const double denom = tp2 + static_cast<double>(fp + fn);
    m.per_class_f1[c] = denom > 0.0 ? tp2 / denom : 0.0;
  }
  for (double f : m.per_class_f1) m.macro_f1 += f;
  m.macro_f1 /= static_cast<double>(k);
  return m;
}

inline Metrics evaluate_scores(const Matrix& scores, std::span<const std::size_t> labels) {
  if (scores.rows() == 0) throw std::invalid_argument("evaluate: empty test set");
  if (labels.size() != scores.rows()) throw std::invalid_argument("evaluate: label count mismatch");
  const std::size_t k = scores.cols();
  CountMatrix confusion(k, std::vector<std::size_t>(k, 0));
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    if (labels[r] >= k) throw std::invalid_argument("evaluate: label out of range");
    ++confusion[labels[r]][predict_row(scores.row(r))];
  }
  return metrics_from_confusion(confusion);
}

inline Metrics evaluate(const Scorer& scorer, const LabeledSet& test) {
  return evaluate_scores(scorer.infer(test.x), test.y);
}

/// Per (true, predicted) cell: the count and the mean multiclass margin
/// f_t(x) - max_{j != t} f_j(x). Cells without samples hold no margin.
struct Heatmaps {
  std::vector<std::vector<std::optional<double>>> margin;
  CountMatrix support;
};

inline Heatmaps margin_support_heatmaps(const Matrix& scores, std::span<const std::size_t> labels) {
  if (labels.size() != scores.rows()) throw std::invalid_argument("heatmaps: label count mismatch");
  const std::size_t k = scores.cols();
  Heatmaps h;
  h.support.assign(k, std::vector<std::size_t>(k, 0));
  std::vector<std::vector<double>> sums(k, std::vector<double>(k, 0.0));
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    const std::size_t t = labels[r];
    if (t >= k) throw std::invalid_argument("heatmaps: label out of range");
    double rival = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (j != t) rival = std::max(rival, row[j]);
    }
    const std::size_t p = predict_row(row);
    ++h.support[t][p];
    sums[t][p] += row[t] - rival;
  }
  h.margin.assign(k, std::vector<std::optional<double>>(k));
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t p = 0; p < k; ++p) {
      if (h.support[t][p] > 0) h.margin[t][p] = sums[t][p] / static_cast<double>(h.support[t][p]);
    }
  }
  return h;
}

inline Heatmaps margin_support_heatmaps(const Scorer& scorer, const LabeledSet& test) {
  return margin_support_heatmaps(scorer.infer(test.x), test.y);
}

}  // namespace csmpu
