#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modalfuse/labels.hpp"

namespace modalfuse {

/// K x K pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  /// Foreground classes default to every class except the last (background).
  explicit ConfusionMatrix(std::int64_t num_classes);
  ConfusionMatrix(std::int64_t num_classes, std::vector<std::int64_t> foreground);

  std::int64_t num_classes() const { return k_; }
  const std::vector<std::int64_t>& foreground() const { return foreground_; }

  std::int64_t at(std::int64_t gt, std::int64_t pred) const { return counts_[index(gt, pred)]; }
  std::int64_t total() const;

  /// Pixels whose ground truth equals ignore_index are skipped. Any other id
  /// outside [0, K) throws, naming the pixel and value.
  void accumulate(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                  std::int32_t ignore_index = -1);
  void accumulate(const LabelMap& pred, const LabelMap& gt, std::int32_t ignore_index = -1);
  /// Element-wise sum; both matrices must have the same classes.
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t index(std::int64_t gt, std::int64_t pred) const {
    return static_cast<std::size_t>(gt * k_ + pred);
  }

  std::int64_t k_;
  std::vector<std::int64_t> foreground_;
  std::vector<std::int64_t> counts_;
};

/// trace / total; 0 for an empty matrix.
double overall_accuracy(const ConfusionMatrix& cm);

struct ClassScore {
  std::int64_t tp = 0, fp = 0, fn = 0;
  /// False when TP + FP + FN = 0; such classes are left out of the means.
  bool present = false;
  double f1 = 0.0;
  double iou = 0.0;
};

ClassScore class_score(const ConfusionMatrix& cm, std::int64_t cls);
double mean_f1(const ConfusionMatrix& cm);
double mean_iou(const ConfusionMatrix& cm);

struct MetricsReport {
  double oa = 0.0;
  double mf1 = 0.0;
  double miou = 0.0;
  std::vector<ClassScore> per_class;
  std::vector<std::int64_t> foreground;
  std::int64_t pixels = 0;
};

MetricsReport make_report(const ConfusionMatrix& cm);
/// Stable JSON text (fixed key order and number formatting).
std::string report_json(const MetricsReport& report, int indent = 2);

}  // namespace modalfuse
