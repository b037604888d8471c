// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atp/core_math.hpp"

namespace atp {

class SegmentationModel;
class Dataset;
struct RunRecord;

/// C x C counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0)
      : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {}

  int num_classes() const { return classes_; }
  std::uint64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * classes_ + pred]; }
  std::uint64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * classes_ + pred]; }
  std::uint64_t total() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

struct IoUReport {
  ConfusionMatrix confusion;
  std::vector<double> per_class_iou;  // 0 for classes outside valid_classes
  std::vector<int> valid_classes;     // present in ground truth or prediction
  std::optional<double> miou;         // empty when the matrix has no counts

  double miou_or_zero() const { return miou.value_or(0.0); }
};

/// Adds pred/gt pixel pairs; ground-truth IGNORE pixels are skipped. Throws
/// InvalidInput for out-of-range classes or mismatched shapes.
void accumulate_confusion(const HardLabelMask& pred, const HardLabelMask& gt, ConfusionMatrix& confusion);

/// Per-class IoU = TP / (TP + FP + FN); the mean runs over classes present in
/// the ground truth or the prediction.
IoUReport compute_miou(const ConfusionMatrix& confusion);

/// Argmax labels of a probability map (ties to the lowest class).
HardLabelMask predict_labels(const ProbabilityMap& p);

/// Runs the model over every image and scores it against the dataset labels.
IoUReport evaluate_model(const SegmentationModel& model, const Dataset& data);

struct EntropySummary {
  std::vector<double> scores;          // per-image mean normalized entropy
  std::vector<std::size_t> histogram;  // bins over [0,1]
  double mean = 0.0;
  double median = 0.0;
};

EntropySummary entropy_statistics(std::span<const ProbabilityMap> maps, int bins = 10);

/// Writes results.csv, summary.txt and PNG plots for a set of runs. The only
/// non-deterministic content is the timestamp on the first line of summary.txt.
void emit_report(std::span<const RunRecord> records, const std::filesystem::path& out_dir);

}  // namespace atp
