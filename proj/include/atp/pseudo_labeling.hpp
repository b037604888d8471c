// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "atp/core_math.hpp"

namespace atp {

/// Per-class confidence thresholds from class-balanced top-K selection.
struct ClassThresholds {
  std::vector<double> values;
  std::vector<std::size_t> counts;  // argmax pixels per class across the input set

  int num_classes() const { return static_cast<int>(values.size()); }
};

struct LabelingStats {
  std::vector<std::size_t> selected;  // positively labeled pixels per class
  std::vector<double> fraction;       // selected / total pixels
  std::vector<std::size_t> negative_flags;  // flagged entries per class
  double ignore_fraction = 0.0;
  std::size_t total_pixels = 0;

  LabelingStats& operator+=(const LabelingStats& other);
};

/// For each class, ranks the argmax pixels by confidence across all maps and
/// picks the threshold so that exactly floor(K * N_c) of them pass a strict
/// `>` comparison when confidences are distinct.
ClassThresholds compute_class_thresholds(std::span<const ProbabilityMap> maps, double K);
ClassThresholds compute_class_thresholds(std::span<const ProbabilityMap* const> maps, double K);

HardLabelMask assign_positive_labels(const ProbabilityMap& p, const ClassThresholds& thresholds);

/// Flags classes whose probability is below lambda_neg, never the argmax class.
NegativeLabelMask assign_negative_labels(const ProbabilityMap& p, double lambda_neg);

LabelingStats labeling_stats(const HardLabelMask& mask, const NegativeLabelMask& neg);

/// Writes labels as an 8-bit single-channel PNG (IGNORE stays 255).
void export_label_mask(const HardLabelMask& mask, const std::filesystem::path& path);

}  // namespace atp
