#pragma once

// JSON and CSV forms of reports, checkpoints and datasets.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "csmpu/data.hpp"
#include "csmpu/io.hpp"
#include "csmpu/metrics.hpp"
#include "csmpu/model.hpp"
#include "csmpu/prior.hpp"
#include "csmpu/risk.hpp"
#include "csmpu/train.hpp"

namespace csmpu {

using Json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;

/// Six significant digits, as used in every CSV report.
inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline Json to_json(const RiskReport& r) {
  return {{"estimator", to_string(r.estimator)},
          {"correction", to_string(r.correction)},
          {"total", r.total},
          {"per_class_terms", r.per_class_terms},
          {"constant_offset", r.constant_offset}};
}

inline Json to_json(const PriorConfig& c) {
  return {{"alphas", c.alphas}, {"epsilon", c.epsilon}, {"lambda", c.lambda},
          {"bins", c.bins},     {"step", c.step},       {"iters", c.iters}};
}

inline Json to_json(const PriorEstimate& e, const PriorConfig& cfg) {
  Json j = {{"point", e.point},
            {"lower_bounds", e.lower_bounds},
            {"detectable", e.detectable},
            {"config", to_json(cfg)}};
  if (e.interval) {
    Json iv = Json::array();
    for (const auto& [lo, hi] : *e.interval) iv.push_back({lo, hi});
    j["interval"] = iv;
  } else {
    j["interval"] = nullptr;
  }
  return j;
}

inline Json to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"macro_f1", m.macro_f1},
          {"per_class_f1", m.per_class_f1},
          {"confusion", m.confusion}};
}

// ---------------------------------------------------------------------------
// Scorer checkpoints

inline Json checkpoint_json(const Scorer& s) {
  return {{"version", kCheckpointVersion},
          {"architecture", s.architecture().widths},
          {"batch_norm", s.architecture().batch_norm},
          {"seed", s.seed()},
          {"parameters", std::vector<double>(s.parameters().begin(), s.parameters().end())},
          {"bn_stats", {{"running_mean", s.running_mean()}, {"running_var", s.running_var()}}}};
}

inline Scorer scorer_from_json(const Json& j) {
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version");
  }
  Architecture arch{j.at("architecture").get<std::vector<std::size_t>>(),
                    j.at("batch_norm").get<bool>()};
  Scorer s(arch, j.at("seed").get<std::uint64_t>());
  const auto params = j.at("parameters").get<std::vector<double>>();
  if (params.size() != s.parameter_count()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(s.parameter_count()) +
                             " parameters, found " + std::to_string(params.size()));
  }
  std::copy(params.begin(), params.end(), s.parameters().begin());
  const auto mean = j.at("bn_stats").at("running_mean").get<std::vector<std::vector<double>>>();
  const auto var = j.at("bn_stats").at("running_var").get<std::vector<std::vector<double>>>();
  if (mean.size() != s.running_mean().size() || var.size() != s.running_var().size()) {
    throw std::runtime_error("checkpoint: batch-norm statistics do not match the architecture");
  }
  for (std::size_t l = 0; l < mean.size(); ++l) {
    if (mean[l].size() != s.running_mean()[l].size() || var[l].size() != s.running_var()[l].size()) {
      throw std::runtime_error("checkpoint: batch-norm layer width mismatch");
    }
  }
  s.running_mean() = mean;
  s.running_var() = var;
  return s;
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << text;
  if (!out) throw std::runtime_error(path + ": write failed");
}

inline void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline Json dataset_manifest(const std::string& source, const MpuDataset& d, double pi_k,
                             std::uint64_t seed) {
  std::vector<std::size_t> counts;
  for (const auto& m : d.sample.observed) counts.push_back(m.rows());
  counts.push_back(d.sample.pool.rows());
  return {{"source", source}, {"k", d.k()}, {"pi_k", pi_k}, {"seed", seed}, {"counts", counts}};
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,batch_risk,full_risk,accuracy,macro_f1\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << fmt6(r.batch_risk) << ',' << fmt6(r.full_risk) << ','
        << (r.accuracy ? fmt6(*r.accuracy) : "") << ',' << (r.macro_f1 ? fmt6(*r.macro_f1) : "")
        << '\n';
  }
  return out.str();
}

inline std::string loss_table_csv(const std::vector<LossTableRow>& rows) {
  std::ostringstream out;
  out << "loss,gamma,sym,const_sum_max,const_sum_p99,macro_f1,accuracy\n";
  for (const auto& r : rows) {
    out << to_string(r.spec.family) << ',' << fmt6(r.spec.gamma) << ','
        << to_string(r.spec.sym_clip) << ',' << fmt6(r.report.max_residual) << ','
        << fmt6(r.report.p99_residual) << ',' << (r.macro_f1 ? fmt6(*r.macro_f1) : "") << ','
        << (r.accuracy ? fmt6(*r.accuracy) : "") << '\n';
  }
  return out.str();
}

inline std::string sweep_csv(const SweepReport& r) {
  std::ostringstream out;
  out << "scheme,l1_delta,macro_f1,emp_bound,theory_bound\n";
  for (const auto& p : r.points) {
    out << to_string(r.scheme) << ',' << fmt6(p.l1_delta) << ',' << fmt6(p.macro_f1) << ','
        << fmt6(p.empirical_bound) << ',' << fmt6(p.theory_bound) << '\n';
  }
  return out.str();
}

/// Square table with a header row; the leading column names the true class.
inline std::string heatmap_margin_csv(const Heatmaps& h) {
  std::ostringstream out;
  const std::size_t k = h.support.size();
  out << "true";
  for (std::size_t p = 0; p < k; ++p) out << ",pred" << p;
  out << '\n';
  for (std::size_t t = 0; t < k; ++t) {
    out << t;
    for (std::size_t p = 0; p < k; ++p) out << ',' << (h.margin[t][p] ? fmt6(*h.margin[t][p]) : "");
    out << '\n';
  }
  return out.str();
}

inline std::string heatmap_support_csv(const Heatmaps& h) {
  std::ostringstream out;
  const std::size_t k = h.support.size();
  out << "true";
  for (std::size_t p = 0; p < k; ++p) out << ",pred" << p;
  out << '\n';
  for (std::size_t t = 0; t < k; ++t) {
    out << t;
    for (std::size_t p = 0; p < k; ++p) out << ',' << h.support[t][p];
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Sample and margin CSVs
//
// Both share a leading `set` column: 1..k-1 for labeled rows of an observed
// class, U for pool rows. Sample files add a trailing `hidden` column with
// the 1-based true class of pool rows (blank when unknown).

inline std::string sample_csv(const MpuDataset& d) {
  std::ostringstream out;
  out.precision(17);
  out << "set";
  for (std::size_t j = 0; j < d.feature_dim(); ++j) out << ",x" << j + 1;
  out << ",hidden\n";
  auto rows = [&](const Matrix& m, const std::string& set, auto&& hidden) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      out << set;
      for (double v : m.row(r)) out << ',' << v;
      out << ',' << hidden(r) << '\n';
    }
  };
  for (std::size_t i = 0; i < d.sample.observed.size(); ++i) {
    rows(d.sample.observed[i], std::to_string(i + 1), [](std::size_t) { return std::string(); });
  }
  rows(d.sample.pool, "U", [&](std::size_t r) {
    return d.hidden_labels ? std::to_string((*d.hidden_labels)[r] + 1) : std::string();
  });
  return out.str();
}

inline std::string margins_csv(const MarginData& m) {
  std::ostringstream out;
  out.precision(17);
  out << "set";
  for (std::size_t j = 0; j < m.classes(); ++j) out << ",z" << j + 1;
  out << '\n';
  auto rows = [&](const Matrix& x, const std::string& set) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      out << set;
      for (double v : x.row(r)) out << ',' << v;
      out << '\n';
    }
  };
  for (std::size_t i = 0; i < m.positives.size(); ++i) rows(m.positives[i], std::to_string(i + 1));
  rows(m.pool, "U");
  return out.str();
}

namespace detail {

/// Rows of a set-tagged CSV grouped by tag; `trailing` extra columns are
/// returned as text.
struct TaggedRows {
  std::size_t width = 0;
  std::map<std::string, Matrix> sets;
  std::map<std::string, std::vector<std::string>> trailing;
};

inline TaggedRows read_tagged_csv(const std::string& path, std::size_t trailing_cols) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ":1: missing header row");
  const auto header = split_commas(line);
  if (header.empty() || header[0] != "set" || header.size() < 2 + trailing_cols) {
    throw ParseError(path + ":1: header must start with 'set'");
  }
  TaggedRows out;
  out.width = header.size() - 1 - trailing_cols;
  std::vector<double> values(out.width);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_commas(line);
    if (fields.size() != header.size()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < out.width; ++j) {
      if (!parse_number(fields[j + 1], values[j])) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": field " + std::to_string(j + 2) +
                         " is not numeric");
      }
    }
    const std::string tag(fields[0]);
    out.sets[tag].append_row(values);
    if (trailing_cols > 0) out.trailing[tag].emplace_back(fields.back());
  }
  return out;
}

/// Observed sets tagged 1..m plus the pool tagged U.
inline void check_tags(const TaggedRows& t, std::size_t m, const std::string& path) {
  for (std::size_t i = 1; i <= m; ++i) {
    if (!t.sets.count(std::to_string(i))) {
      throw ParseError(path + ": no rows for set " + std::to_string(i));
    }
  }
  if (!t.sets.count("U")) throw ParseError(path + ": no pool rows (set U)");
  if (t.sets.size() != m + 1) throw ParseError(path + ": unexpected set tags");
}

}  // namespace detail

inline MarginData read_margins_csv(const std::string& path) {
  auto t = detail::read_tagged_csv(path, 0);
  detail::check_tags(t, t.width, path);
  MarginData m;
  for (std::size_t i = 1; i <= t.width; ++i) m.positives.push_back(std::move(t.sets[std::to_string(i)]));
  m.pool = std::move(t.sets["U"]);
  return m;
}

/// Reads a sample CSV; priors must be supplied separately.
inline MpuDataset read_sample_csv(const std::string& path, std::vector<double> priors) {
  auto t = detail::read_tagged_csv(path, 1);
  const std::size_t k = priors.size();
  if (k < 2) throw std::invalid_argument("sample csv: need at least 2 priors");
  detail::check_tags(t, k - 1, path);
  MpuDataset d;
  for (std::size_t i = 1; i < k; ++i) d.sample.observed.push_back(std::move(t.sets[std::to_string(i)]));
  d.sample.pool = std::move(t.sets["U"]);
  d.sample.priors = std::move(priors);
  const auto& hidden = t.trailing["U"];
  if (!hidden.empty() && !hidden.front().empty()) {
    std::vector<std::size_t> labels;
    for (const auto& h : hidden) {
      std::size_t v = 0;
      if (!detail::parse_number(std::string_view(h), v) || v < 1 || v > k) {
        throw ParseError(path + ": hidden label '" + h + "' outside 1.." + std::to_string(k));
      }
      labels.push_back(v - 1);
    }
    d.hidden_labels = std::move(labels);
  }
  d.sample.validate();
  return d;
}

}  // namespace csmpu
