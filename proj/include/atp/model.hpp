// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale encoder-decoder segmentation network M = f o g, its SGD
// optimizer with the poly schedule, teacher snapshots and checkpoints.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "atp/core_math.hpp"
#include "atp/image.hpp"

namespace atp {

struct ModelShape {
  int num_classes = 5;
  int feature_dim = 64;  // D, width of the feature extractor output
  int width1 = 12;       // full-resolution stage width
  int width2 = 24;       // half resolution
  int width3 = 48;       // quarter resolution

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

namespace detail {
struct Workspace;
struct Layout;
}  // namespace detail

/// Activation cache for one forward pass; reusable across passes.
class ForwardCache {
 public:
  ForwardCache();
  ~ForwardCache();
  ForwardCache(ForwardCache&&) noexcept;
  ForwardCache& operator=(ForwardCache&&) noexcept;

 private:
  friend class SegmentationModel;
  std::unique_ptr<detail::Workspace> ws_;
};

class SegmentationModel {
 public:
  SegmentationModel(const ModelShape& shape, std::vector<float> params);

  const ModelShape& shape() const { return shape_; }
  int num_classes() const { return shape_.num_classes; }

  /// Inference. Thread-safe on a const model.
  ProbabilityMap forward(const Image& image) const;
  /// Forward pass recording activations for backward().
  ProbabilityMap forward(const Image& image, ForwardCache& cache) const;
  /// Accumulates dL/dparams into grad for the pass recorded in cache.
  void backward(const ForwardCache& cache, std::span<const double> grad_probs, std::span<float> grad) const;

  std::span<float> parameters() { return params_; }
  std::span<const float> parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  /// Parameters of the classifier g occupy [classifier_offset(), end).
  std::size_t classifier_offset() const;

  bool classifier_frozen() const { return classifier_frozen_; }
  void set_classifier_frozen(bool frozen) { classifier_frozen_ = frozen; }

 private:
  ModelShape shape_;
  std::shared_ptr<const detail::Layout> layout_;
  std::vector<float> params_;
  bool classifier_frozen_ = false;
};

/// Seeded construction; the same (shape, seed) yields bit-identical parameters.
SegmentationModel build_model(int num_classes, int feature_dim, std::uint64_t seed);
SegmentationModel build_model(const ModelShape& shape, std::uint64_t seed);

SegmentationModel& freeze_classifier(SegmentationModel& m, bool frozen);

/// Gradient-free copy of a model taken at one point in training.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const SegmentationModel& m) : model_(m) {}

  ProbabilityMap forward(const Image& image) const { return model_.forward(image); }
  const SegmentationModel& model() const { return model_; }

 private:
  SegmentationModel model_;
};

TeacherSnapshot snapshot_teacher(const SegmentationModel& m);
inline TeacherSnapshot snapshot_teacher(const TeacherSnapshot& t) { return TeacherSnapshot(t.model()); }

struct TrainSchedule {
  double base_lr = 1e-2;
  double classifier_lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::int64_t max_iter = 1;
  double poly_power = 0.9;
};

/// base_lr * (1 - iter/max_iter)^power, clamped to 0 beyond max_iter.
double lr_at(const TrainSchedule& schedule, std::int64_t iter);

struct SgdState {
  std::vector<float> momentum;
  std::int64_t iteration = 0;
};

/// One SGD-with-momentum update (PyTorch convention: v = mu v + g + wd w,
/// w -= lr v). The classifier uses classifier_lr under the same poly decay and
/// is skipped entirely while frozen. Throws TrainingError on a non-finite
/// gradient without touching the model.
void optimize_step(SegmentationModel& m, SgdState& state, std::span<const float> grad, const TrainSchedule& schedule,
                   std::int64_t iter);

/// Per-sample view used while computing a batch gradient. forward() may be
/// called several times; each backward() applies to the most recent forward.
class SampleTape {
 public:
  SampleTape(const SegmentationModel& m, std::span<float> grad) : model_(m), grad_(grad) {}

  ProbabilityMap forward(const Image& image) { return model_.forward(image, cache_); }
  void backward(std::span<const double> grad_probs) { model_.backward(cache_, grad_probs, grad_); }

 private:
  const SegmentationModel& model_;
  std::span<float> grad_;
  ForwardCache cache_;
};

/// Returns the sample's loss after recording its gradient on the tape.
using SampleObjective = std::function<double(std::size_t sample, SampleTape& tape)>;

/// Evaluates objective on every sample (in parallel), averages the per-sample
/// gradients in sample order and applies optimize_step at state.iteration,
/// then advances the iteration. Returns the mean sample loss.
double train_batch(SegmentationModel& m, SgdState& state, const TrainSchedule& schedule,
                   std::span<const std::size_t> samples, const SampleObjective& objective);

/// Loss over a whole batch of predictions (e.g. a batch-level class
/// marginal). Writes dL/dp for each sample into grad_probs and returns L.
using BatchTerm =
    std::function<double(std::span<const ProbabilityMap> probs, std::span<std::vector<double>> grad_probs)>;

/// Forwards every image, evaluates `term` on the joint predictions, then
/// backpropagates each sample and applies one optimize_step. The gradient is
/// used as returned by the term (no extra averaging).
double train_batch_joint(SegmentationModel& m, SgdState& state, const TrainSchedule& schedule,
                         std::span<const Image* const> images, const BatchTerm& term);

/// Versioned binary checkpoint: "ATPC", u32 version, architecture, flags,
/// iteration, parameter buffer and momentum buffer (little-endian f32).
void save_checkpoint(const std::filesystem::path& path, const SegmentationModel& m, const SgdState& state);

struct Checkpoint {
  SegmentationModel model;
  SgdState state;
};

/// Throws FormatError on a malformed file or when `expected` is given and the
/// stored architecture differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelShape* expected = nullptr);

}  // namespace atp
