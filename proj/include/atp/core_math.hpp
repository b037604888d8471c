// SPDX-License-Identifier: Apache-2.0
//
// Per-pixel probability maps and the differentiable objectives defined on
// them. Every loss accumulates `scale * dL/dp` into an optional gradient
// buffer laid out like ProbabilityMap::values(), so composite objectives are
// formed by calling several losses against the same buffer.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace atp {

/// Smoothing constant added inside every logarithm.
inline constexpr double kLogEpsilon = 1e-12;

/// Reserved label value. Class indices must stay below it.
inline constexpr std::uint8_t kIgnore = 255;

/// H x W x C class distribution, stored row-major with the class axis minor.
class ProbabilityMap {
 public:
  ProbabilityMap() = default;
  ProbabilityMap(int height, int width, int num_classes);
  ProbabilityMap(int height, int width, int num_classes, std::vector<double> values);

  int height() const { return height_; }
  int width() const { return width_; }
  int num_classes() const { return classes_; }
  std::size_t pixels() const { return static_cast<std::size_t>(height_) * width_; }

  double& at(int h, int w, int c) { return values_[index(h, w, c)]; }
  double at(int h, int w, int c) const { return values_[index(h, w, c)]; }

  std::span<double> pixel(std::size_t i) { return {values_.data() + i * classes_, static_cast<std::size_t>(classes_)}; }
  std::span<const double> pixel(std::size_t i) const {
    return {values_.data() + i * classes_, static_cast<std::size_t>(classes_)};
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  /// Throws InvalidInput unless entries lie in [0,1] and pixels sum to 1 (1e-5).
  void validate() const;

  bool same_shape(const ProbabilityMap& other) const {
    return height_ == other.height_ && width_ == other.width_ && classes_ == other.classes_;
  }

  friend bool operator==(const ProbabilityMap&, const ProbabilityMap&) = default;

 private:
  std::size_t index(int h, int w, int c) const {
    return (static_cast<std::size_t>(h) * width_ + w) * classes_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int classes_ = 0;
  std::vector<double> values_;
};

/// Normalized per-pixel entropy in [0,1].
struct EntropyMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int h, int w) const { return values[static_cast<std::size_t>(h) * width + w]; }
};

/// Per-pixel class index or kIgnore.
struct HardLabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  HardLabelMask() = default;
  HardLabelMask(int h, int w, std::uint8_t fill = kIgnore)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int h, int w) { return labels[static_cast<std::size_t>(h) * width + w]; }
  std::uint8_t at(int h, int w) const { return labels[static_cast<std::size_t>(h) * width + w]; }
  std::size_t pixels() const { return labels.size(); }

  friend bool operator==(const HardLabelMask&, const HardLabelMask&) = default;
};

/// Per-pixel, per-class "definitely not this class" flags.
struct NegativeLabelMask {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> flags;

  NegativeLabelMask() = default;
  NegativeLabelMask(int h, int w, int c)
      : height(h), width(w), num_classes(c), flags(static_cast<std::size_t>(h) * w * c, 0) {}

  std::span<std::uint8_t> pixel(std::size_t i) {
    return {flags.data() + i * num_classes, static_cast<std::size_t>(num_classes)};
  }
  std::span<const std::uint8_t> pixel(std::size_t i) const {
    return {flags.data() + i * num_classes, static_cast<std::size_t>(num_classes)};
  }

  friend bool operator==(const NegativeLabelMask&, const NegativeLabelMask&) = default;
};

struct LossValue {
  double value = 0.0;
  std::size_t contributing_pixels = 0;
};

/// Row-wise softmax over an H x W x C logit buffer (class-minor).
ProbabilityMap softmax(std::span<const double> logits, int height, int width, int num_classes);

/// Chains dL/dp through the softmax: writes dL/dz for each logit.
void softmax_backward(const ProbabilityMap& p, std::span<const double> grad_p, std::span<double> grad_logits);

/// Index of the largest probability; ties go to the lowest class.
int argmax(std::span<const double> probs);

EntropyMap compute_entropy_map(const ProbabilityMap& p);

/// Mean over pixels of alpha * (1 - h)^gamma * h.
LossValue curriculum_entropy_loss(const ProbabilityMap& p, double alpha, double gamma,
                                  std::span<double> grad = {}, double scale = 1.0);

/// sum_c q_c ln q_c where q is the exp(-lambda h)-weighted mean prediction.
LossValue weighted_diversity_loss(const ProbabilityMap& p, double lambda_w, std::span<double> grad = {},
                                  double scale = 1.0);

/// Mean over non-ignored pixels of -ln p[label].
LossValue cross_entropy_loss(const ProbabilityMap& p, const HardLabelMask& labels, std::span<double> grad = {},
                             double scale = 1.0);

/// Mean over pixels with at least one flag of sum_c flag * -ln(1 - p_c).
LossValue negative_pseudo_loss(const ProbabilityMap& p, const NegativeLabelMask& neg, std::span<double> grad = {},
                               double scale = 1.0);

LossValue bidirectional_loss(const LossValue& ppl, const LossValue& npl);

/// Mean per-pixel KL(teacher || student). Gradient flows to the student only.
LossValue kd_loss(const ProbabilityMap& teacher, const ProbabilityMap& student, std::span<double> grad = {},
                  double scale = 1.0);

/// Default teacher confidence gate for consistency_loss.
inline constexpr double kConsistencyGate = 0.968;

/// Teacher argmax labels, kept only where the teacher's top probability is >= gate.
HardLabelMask gated_pseudo_labels(const ProbabilityMap& teacher, double gate = kConsistencyGate);

/// Cross-entropy of the student against gated teacher pseudo labels, further
/// restricted to pixels where `confidence_mask` is non-zero (empty = all).
LossValue consistency_loss(const ProbabilityMap& teacher, const ProbabilityMap& student,
                           std::span<const std::uint8_t> confidence_mask = {}, std::span<double> grad = {},
                           double scale = 1.0, double gate = kConsistencyGate);

}  // namespace atp
