#include "modalfuse/metrics.hpp"

#include <json.hpp>
#include <numeric>
#include <stdexcept>

#include "modalfuse/errors.hpp"

namespace modalfuse {

namespace {

std::vector<std::int64_t> default_foreground(std::int64_t k) {
  std::vector<std::int64_t> fg(static_cast<std::size_t>(std::max<std::int64_t>(k - 1, 0)));
  std::iota(fg.begin(), fg.end(), 0);
  return fg;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes)
    : ConfusionMatrix(num_classes, default_foreground(num_classes)) {}

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes, std::vector<std::int64_t> foreground)
    : k_(num_classes), foreground_(std::move(foreground)) {
  if (k_ < 1) throw ConfigError("confusion matrix needs at least one class");
  for (auto c : foreground_) {
    if (c < 0 || c >= k_) throw ConfigError("foreground class " + std::to_string(c) + " out of range");
  }
  counts_.assign(static_cast<std::size_t>(k_ * k_), 0);
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

void ConfusionMatrix::accumulate(const std::vector<std::int32_t>& pred,
                                 const std::vector<std::int32_t>& gt, std::int32_t ignore_index) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion matrix: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(gt.size()) + " labels");
  }
  // Validate first so a bad pixel leaves the matrix untouched.
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_index) continue;
    if (gt[i] < 0 || gt[i] >= k_) {
      throw std::out_of_range("ground-truth label " + std::to_string(gt[i]) + " at pixel " +
                              std::to_string(i) + " outside [0, " + std::to_string(k_) + ")");
    }
    if (pred[i] < 0 || pred[i] >= k_) {
      throw std::out_of_range("predicted label " + std::to_string(pred[i]) + " at pixel " +
                              std::to_string(i) + " outside [0, " + std::to_string(k_) + ")");
    }
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_index) continue;
    ++counts_[index(gt[i], pred[i])];
  }
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt,
                                 std::int32_t ignore_index) {
  if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("confusion matrix: prediction and label maps differ in shape");
  }
  accumulate(pred.ids, gt.ids, ignore_index);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("confusion matrix: class count mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) return 0.0;
  std::int64_t diag = 0;
  for (std::int64_t c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

ClassScore class_score(const ConfusionMatrix& cm, std::int64_t cls) {
  ClassScore s;
  s.tp = cm.at(cls, cls);
  for (std::int64_t j = 0; j < cm.num_classes(); ++j) {
    if (j == cls) continue;
    s.fn += cm.at(cls, j);
    s.fp += cm.at(j, cls);
  }
  const std::int64_t denom = s.tp + s.fp + s.fn;
  s.present = denom > 0;
  if (s.present) {
    s.iou = static_cast<double>(s.tp) / static_cast<double>(denom);
    s.f1 = 2.0 * static_cast<double>(s.tp) / static_cast<double>(2 * s.tp + s.fp + s.fn);
  }
  return s;
}

namespace {

template <typename F>
double foreground_mean(const ConfusionMatrix& cm, F field) {
  double sum = 0.0;
  int n = 0;
  for (auto c : cm.foreground()) {
    const ClassScore s = class_score(cm, c);
    if (!s.present) continue;
    sum += field(s);
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace

double mean_f1(const ConfusionMatrix& cm) {
  return foreground_mean(cm, [](const ClassScore& s) { return s.f1; });
}

double mean_iou(const ConfusionMatrix& cm) {
  return foreground_mean(cm, [](const ClassScore& s) { return s.iou; });
}

MetricsReport make_report(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.oa = overall_accuracy(cm);
  r.mf1 = mean_f1(cm);
  r.miou = mean_iou(cm);
  r.foreground = cm.foreground();
  r.pixels = cm.total();
  for (std::int64_t c = 0; c < cm.num_classes(); ++c) r.per_class.push_back(class_score(cm, c));
  return r;
}

std::string report_json(const MetricsReport& report, int indent) {
  nlohmann::ordered_json j;
  j["oa"] = report.oa;
  j["mf1"] = report.mf1;
  j["miou"] = report.miou;
  j["pixels"] = report.pixels;
  j["foreground"] = report.foreground;
  auto& classes = j["per_class"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& s = report.per_class[c];
    classes.push_back({{"id", c},
                       {"present", s.present},
                       {"f1", s.f1},
                       {"iou", s.iou},
                       {"tp", s.tp},
                       {"fp", s.fp},
                       {"fn", s.fn}});
  }
  return j.dump(indent);
}

}  // namespace modalfuse
