#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecgmamba/tensor.hpp"

namespace ecgmamba {

/// AUC of one class via the Mann-Whitney rank statistic with tie-averaged
/// ranks: P(score+ > score-) + P(tie) / 2. Empty when the class lacks
/// positives or negatives.
std::optional<double> auc_binary(std::span<const double> scores, std::span<const double> labels);

/// Unweighted mean of per-class AUC over classes that have both positives and
/// negatives; excluded class indices are appended to `excluded`. Throws
/// MetricUndefinedError when no class qualifies.
double auc_macro(const Tensor& scores, const Tensor& labels, std::vector<std::size_t>* excluded = nullptr);

/// Per-class F1 = 2TP / (2TP + FP + FN) with 0/0 := 0, averaged over all classes.
double f1_macro(const Tensor& pred, const Tensor& labels);

enum class AccuracyMode { subset, per_label };
double accuracy(const Tensor& pred, const Tensor& labels, AccuracyMode mode = AccuracyMode::subset);

/// pred = 1 where sigmoid(logit) >= threshold.
Tensor binarize(const Tensor& logits, double threshold = 0.5);

struct ClassMetrics {
  std::string name;
  std::optional<double> auc;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  /// Empty when no class has both positives and negatives.
  std::optional<double> auc_macro;
  double f1_macro = 0.0;
  double acc_subset = 0.0;
  double acc_per_label = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::string> auc_excluded;
  std::uint64_t param_count = 0;
  std::uint64_t flop_count = 0;
};

/// logits, labels [B, C]; class_names has C entries (or is empty for "class_<k>").
MetricsReport make_report(const Tensor& logits, const Tensor& labels, const std::vector<std::string>& class_names);

nlohmann::json to_json(const MetricsReport& report);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report);

}  // namespace ecgmamba
