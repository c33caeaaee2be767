#include "evl/metrics.hpp"

#include <algorithm>
#include <numeric>

#include <Eigen/SVD>

#include "evl/errors.hpp"

namespace evl {

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    per.push_back({{"name", c.name},
                   {"auc", c.auc_defined ? nlohmann::json(c.auc) : nlohmann::json(nullptr)},
                   {"f1", c.f1},
                   {"positives", c.positives}});
  }
  return {{"macro_auc", r.macro_auc}, {"macro_f1", r.macro_f1}, {"hamming_loss", r.hamming_loss},
          {"per_class", per},         {"flagged", r.flagged},   {"seed", r.seed}};
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw InputError("roc_auc needs both positives and negatives");
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double f1_score(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw DimensionError("f1_score: scores and labels differ in length");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i]) ++tp;
    else if (pred) ++fp;
    else if (labels[i]) ++fn;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

MetricsReport compute_metrics(const Tensor& scores, const std::vector<std::vector<int>>& labels,
                              const std::vector<std::string>& class_names, double threshold) {
  if (scores.rank() != 2 || scores.rows() != labels.size() || scores.rows() == 0) {
    throw DimensionError("metrics: scores " + shape_str(scores.shape()) + " vs " +
                         std::to_string(labels.size()) + " label rows");
  }
  const std::size_t n = scores.rows(), k = scores.cols();
  if (class_names.size() != k) throw DimensionError("metrics: class name count differs from K");
  MetricsReport r;
  std::size_t wrong = 0, defined = 0;
  double auc_sum = 0.0, f1_sum = 0.0;
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics cm;
    cm.name = class_names[c];
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i].size() != k) throw DimensionError("metrics: ragged label rows");
      s[i] = scores(i, c);
      y[i] = labels[i][c] != 0;
      cm.positives += static_cast<std::size_t>(y[i]);
      wrong += static_cast<std::size_t>((s[i] >= threshold) != (y[i] != 0));
    }
    if (cm.positives > 0 && cm.positives < n) {
      cm.auc = roc_auc(s, y);
      cm.auc_defined = true;
      auc_sum += cm.auc;
      ++defined;
    } else {
      r.flagged.push_back(cm.name);
    }
    cm.f1 = f1_score(s, y, threshold);
    f1_sum += cm.f1;
    r.per_class.push_back(cm);
  }
  if (defined == 0) throw InputError("macro AUC undefined: no class has both positives and negatives");
  r.macro_auc = auc_sum / static_cast<double>(defined);
  r.macro_f1 = f1_sum / static_cast<double>(k);
  r.hamming_loss = static_cast<double>(wrong) / static_cast<double>(n * k);
  return r;
}

std::vector<double> singular_values(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("singular_values expects a matrix, got " + shape_str(m.shape()));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
      m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  const Eigen::VectorXd& sv = svd.singularValues();
  std::vector<double> out(sv.data(), sv.data() + sv.size());
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

}  // namespace evl
