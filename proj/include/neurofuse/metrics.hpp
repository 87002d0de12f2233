#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neurofuse/tensor.hpp"

namespace nf {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  int32_t num_classes = 0;
  std::vector<int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int32_t k);
  static ConfusionMatrix from_labels(const std::vector<int32_t>& truth, const std::vector<int32_t>& predicted,
                                     int32_t k);

  int64_t& at(int32_t truth, int32_t predicted) { return counts[truth * num_classes + predicted]; }
  int64_t at(int32_t truth, int32_t predicted) const { return counts[truth * num_classes + predicted]; }
  void add(int32_t truth, int32_t predicted);
  int64_t total() const;
  bool operator==(const ConfusionMatrix&) const = default;
};

/// One-vs-rest ROC polyline from (0,0) to (1,1); `auc` is empty when the
/// column has no positives or no negatives.
struct RocCurve {
  std::vector<double> fpr;
  std::vector<double> tpr;
  std::optional<double> auc;
  bool operator==(const RocCurve&) const = default;
};

struct RocResult {
  std::vector<RocCurve> per_class;
  RocCurve micro;
};

struct MetricReport {
  ConfusionMatrix confusion;
  std::vector<std::string> class_names;
  double accuracy = 0;
  std::vector<double> precision, recall, f1;  // per class
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  double micro_precision = 0, micro_recall = 0, micro_f1 = 0;
  double mcc = 0;
  std::vector<RocCurve> roc;  // per class; empty until ROC is attached
  RocCurve micro_roc;
  bool operator==(const MetricReport&) const = default;
};

/// Counting metrics only; 0/0 ratios and a zero MCC denominator give 0.
MetricReport compute_metrics(const ConfusionMatrix& cm);

/// Multiclass MCC (Gorodkin's R_K statistic).
double matthews_corrcoef(const ConfusionMatrix& cm);

/// ROC of one score column against binary labels; equal scores form one step.
RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive);

/// Per-class one-vs-rest and micro-averaged ROC of scores [N, K].
RocResult roc_auc(const Tensor<double>& scores, const std::vector<int32_t>& labels);

/// Full report from class scores: argmax predictions, counting metrics and ROC.
MetricReport evaluate_scores(const Tensor<double>& scores, const std::vector<int32_t>& labels,
                             std::vector<std::string> class_names = {});

/// Plain-text summary of the headline numbers.
std::string format_report(const MetricReport& report);

/// Writes roc.png, confusion.png, metrics.txt, confusion.txt and roc.txt into
/// `out_dir`, creating it if needed. Returns the written paths.
std::vector<std::filesystem::path> emit_plots(const MetricReport& report, const std::filesystem::path& out_dir);

}  // namespace nf
