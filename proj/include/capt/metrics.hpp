#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/errors.hpp"

namespace capt {

// Labels of one example. Single-label tasks use one element.
using LabelSet = std::vector<std::string>;

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold occurrences
};

struct MetricsReport {
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t num_examples = 0;
  std::map<std::string, ClassMetrics> per_class;

  nlohmann::json to_json() const {
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [label, m] : per_class) {
      classes[label] = {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
    }
    return {{"macro_f1", macro_f1}, {"accuracy", accuracy}, {"num_examples", num_examples}, {"per_class", classes}};
  }
};

inline LabelSet normalize_labels(LabelSet s) {
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

// Per-label precision/recall/F1 with set membership, so multi-label examples
// contribute to every label they carry. Zero denominators give 0. Classes
// with neither gold nor predicted occurrences are left out of the macro
// average. Accuracy is exact set match. Predicted strings outside `labels`
// only ever count as errors.
inline MetricsReport macro_f1(const std::vector<LabelSet>& preds, const std::vector<LabelSet>& golds,
                              const std::vector<std::string>& labels) {
  if (preds.size() != golds.size()) {
    throw LengthMismatch("predictions (" + std::to_string(preds.size()) + ") and gold labels (" +
                         std::to_string(golds.size()) + ") differ in length");
  }
  if (labels.empty()) throw InvalidArgument("label list must not be empty");

  MetricsReport r;
  r.num_examples = preds.size();
  std::size_t exact = 0;
  std::map<std::string, std::size_t> tp, fp, fn;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto p = normalize_labels(preds[i]);
    const auto g = normalize_labels(golds[i]);
    if (p == g) ++exact;
    for (const auto& l : p) {
      if (std::binary_search(g.begin(), g.end(), l)) {
        ++tp[l];
      } else {
        ++fp[l];
      }
    }
    for (const auto& l : g) {
      if (!std::binary_search(p.begin(), p.end(), l)) ++fn[l];
    }
  }
  r.accuracy = preds.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(preds.size());

  double f1_sum = 0.0;
  for (const auto& label : normalize_labels(labels)) {
    const double t = static_cast<double>(tp[label]);
    const double fpos = static_cast<double>(fp[label]);
    const double fneg = static_cast<double>(fn[label]);
    if (t + fpos + fneg == 0.0) continue;
    ClassMetrics m;
    m.support = tp[label] + fn[label];
    m.precision = t + fpos > 0.0 ? t / (t + fpos) : 0.0;
    m.recall = t + fneg > 0.0 ? t / (t + fneg) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    f1_sum += m.f1;
    r.per_class[label] = m;
  }
  r.macro_f1 = r.per_class.empty() ? 0.0 : f1_sum / static_cast<double>(r.per_class.size());
  return r;
}

inline MetricsReport macro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                              const std::vector<std::string>& labels) {
  std::vector<LabelSet> p, g;
  for (const auto& s : preds) p.push_back({s});
  for (const auto& s : golds) g.push_back({s});
  return macro_f1(p, g, labels);
}

}  // namespace capt
