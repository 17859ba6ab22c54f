// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmt/model.hpp"

namespace cmt {

/// counts[true][pred].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : n_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * n_ + pred); }
  void add(std::size_t truth, std::size_t pred) {
    if (truth >= n_ || pred >= n_)
      throw InputError("label pair (" + std::to_string(truth) + ", " + std::to_string(pred) + ") out of range for " +
                       std::to_string(n_) + " classes");
    ++counts_[truth * n_ + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_; ++i) t += at(i, i);
    return t;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                                 std::size_t classes) {
  if (pred.size() != truth.size())
    throw InputError("confusion: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(truth.size()) +
                     " labels");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(truth[i], pred[i]);
  return cm;
}

enum class Averaging { macro, weighted };

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
  bool never_predicted = false;  ///< precision defined as 0
  bool absent = false;           ///< recall defined as 0
};

struct MetricReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double cross_entropy = 0.0;
  Averaging averaging = Averaging::macro;
  std::vector<ClassMetrics> per_class;
};

/// Accuracy, per-class P/R/F1 and their (macro by default) averages.
/// A rate whose denominator is zero is defined as 0 and flagged.
inline MetricReport metrics(const ConfusionMatrix& cm, const std::vector<double>& losses,
                            Averaging avg = Averaging::macro) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw InputError("metrics: empty confusion matrix");
  const std::size_t C = cm.classes();
  MetricReport r;
  r.averaging = avg;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  for (std::size_t k = 0; k < C; ++k) {
    std::uint64_t tp = cm.at(k, k), col = 0, row = 0;
    for (std::size_t j = 0; j < C; ++j) {
      col += cm.at(j, k);
      row += cm.at(k, j);
    }
    ClassMetrics m;
    m.support = row;
    m.never_predicted = col == 0;
    m.absent = row == 0;
    m.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    m.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    r.per_class.push_back(m);
  }
  for (const auto& m : r.per_class) {
    const double w = avg == Averaging::macro ? 1.0 / static_cast<double>(C)
                                             : static_cast<double>(m.support) / static_cast<double>(total);
    r.precision += w * m.precision;
    r.recall += w * m.recall;
    r.f1 += w * m.f1;
  }
  if (!losses.empty()) {
    double s = 0.0;
    for (double l : losses) s += l;
    r.cross_entropy = s / static_cast<double>(losses.size());
  }
  return r;
}

struct Evaluation {
  MetricReport report;
  ConfusionMatrix confusion;
  std::vector<std::size_t> predictions;
  std::vector<double> losses;
};

/// Inference-mode forward over every sample, in order.
inline Evaluation evaluate(const CmtModel& model, const std::vector<MultimodalSample>& data) {
  if (data.empty()) throw InputError("evaluate: empty dataset");
  const auto& c = model.config;
  Evaluation e;
  std::vector<std::size_t> truth;
  Rng rng(0);
  for (const auto& s : data) {
    if (s.label >= c.num_classes())
      throw InputError("sample " + std::to_string(s.id) + ": label " + std::to_string(s.label) + " but model has " +
                       std::to_string(c.num_classes()) + " classes");
    EmotionDistribution d;
    try {
      d = forward(s, model, rng, false);
    } catch (const Error& err) {
      throw InputError("sample " + std::to_string(s.id) + " is incompatible with the model: " + err.what());
    }
    e.predictions.push_back(d.argmax);
    e.losses.push_back(cross_entropy(d, s.label));
    truth.push_back(s.label);
  }
  e.confusion = confusion(e.predictions, truth, c.num_classes());
  e.report = metrics(e.confusion, e.losses);
  return e;
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline const char* table_csv_header() { return "model,accuracy,f1,precision,recall,cross_entropy,latency_ms"; }

/// One row in the column order of the comparison table. Latency is left
/// empty when not measured.
inline std::string table_csv_row(const std::string& model, const MetricReport& r,
                                 std::optional<double> latency_ms = std::nullopt) {
  std::ostringstream os;
  os << model << ',' << format_fixed(r.accuracy, 6) << ',' << format_fixed(r.f1, 6) << ','
     << format_fixed(r.precision, 6) << ',' << format_fixed(r.recall, 6) << ',' << format_fixed(r.cross_entropy, 6)
     << ',';
  if (latency_ms) os << format_fixed(*latency_ms, 1);
  return os.str();
}

inline std::string format_report(const MetricReport& r, const std::vector<std::string>& labels) {
  std::ostringstream os;
  os << "averaging      " << (r.averaging == Averaging::macro ? "macro" : "weighted") << '\n'
     << "accuracy       " << format_fixed(r.accuracy, 4) << '\n'
     << "precision      " << format_fixed(r.precision, 4) << '\n'
     << "recall         " << format_fixed(r.recall, 4) << '\n'
     << "f1             " << format_fixed(r.f1, 4) << '\n'
     << "cross-entropy  " << format_fixed(r.cross_entropy, 4) << '\n';
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& m = r.per_class[k];
    os << "  " << (k < labels.size() ? labels[k] : std::to_string(k)) << ": P=" << format_fixed(m.precision, 3)
       << " R=" << format_fixed(m.recall, 3) << " F1=" << format_fixed(m.f1, 3) << " n=" << m.support;
    if (m.never_predicted) os << " [never predicted]";
    if (m.absent) os << " [absent]";
    os << '\n';
  }
  return os.str();
}

}  // namespace cmt
