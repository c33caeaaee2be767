#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "evl/tensor.hpp"

namespace evl {

struct ClassMetrics {
  std::string name;
  double auc = 0.0;
  bool auc_defined = false;  // false when the class lacks positives or negatives
  double f1 = 0.0;
  std::size_t positives = 0;
};

struct MetricsReport {
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  double hamming_loss = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::string> flagged;  // classes left out of the macro AUC
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const MetricsReport& r);

// Rank-sum ROC-AUC with midranks (ties get half credit). Requires at least
// one positive and one negative.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// F1 with prediction score >= threshold; 1 when there are no positives and
// none are predicted.
double f1_score(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

// scores: N x K probabilities; labels: N rows of K 0/1 entries.
MetricsReport compute_metrics(const Tensor& scores, const std::vector<std::vector<int>>& labels,
                              const std::vector<std::string>& class_names, double threshold = 0.5);

// Singular values in descending order.
std::vector<double> singular_values(const Tensor& m);

}  // namespace evl
