// SPDX-License-Identifier: Apache-2.0
//
// Entropy ranking, easy/hard splitting and the semi-supervised propagation
// objective (supervised easy term + ClassMix consistency on hard images).
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "atp/core_math.hpp"
#include "atp/image.hpp"
#include "atp/model.hpp"

namespace atp {

struct SplitAssignment {
  std::vector<double> scores;
  std::vector<std::size_t> easy_ids;  // ascending score, ties by id
  std::vector<std::size_t> hard_ids;
  double ratio = 0.5;

  bool is_easy(std::size_t id) const;
};

/// Mean normalized entropy of a map, in [0,1].
double rank_image(const ProbabilityMap& p);

/// The round(ratio * n) lowest-scoring images form the easy split.
SplitAssignment split_dataset(std::span<const double> scores, double ratio);

/// "<image-id>,<score>,<easy|hard>" per line, in image-id order.
std::string split_manifest(const SplitAssignment& split);
void write_split_manifest(const SplitAssignment& split, const std::filesystem::path& path);

enum class AugmentationKind { kColorJitter, kGaussianBlur, kClassMix };

struct AugmentationOp {
  AugmentationKind kind = AugmentationKind::kColorJitter;
  // Color jitter: factors drawn uniformly from [1 - s, 1 + s].
  double brightness = 0.0;
  double contrast = 0.0;
  double saturation = 0.0;
  // Gaussian blur standard deviation in pixels (0 = identity).
  double blur_sigma = 0.0;

  static AugmentationOp color_jitter(double brightness, double contrast, double saturation);
  static AugmentationOp gaussian_blur(double sigma);
};

struct MixResult {
  Image image;
  HardLabelMask labels;               // labels_a where pasted, IGNORE elsewhere
  std::vector<std::uint8_t> pasted;   // 1 where the pixel came from image a
  std::vector<int> selected_classes;
};

/// Pastes the pixels of floor(k/2) randomly chosen classes present in
/// labels_a (k = number of present classes) from img_a onto img_b. IGNORE
/// pixels are never pasted. `paste_all` selects every present class.
MixResult classmix(const Image& img_a, const HardLabelMask& labels_a, const Image& img_b, std::uint64_t seed,
                   bool paste_all = false);

/// Photometric ops only; output clamped to [0,1]. Throws InvalidInput for kClassMix.
Image photometric_augment(const Image& img, const AugmentationOp& op, std::uint64_t seed);

struct PropagationOptions {
  std::vector<AugmentationOp> photometric;  // applied in order after the mix
  double cyc_weight = 1.0;
  double confidence_gate = kConsistencyGate;
};

/// Student input and consistency target for one hard image: the easy image's
/// pseudo-labeled classes are mixed onto the hard image, then photometric ops
/// run. The target is the teacher's clean-hard prediction, replaced by the
/// one-hot easy label on pasted pixels.
struct ConsistencyPair {
  Image student_input;
  ProbabilityMap target;
};

ConsistencyPair build_consistency_pair(const ProbabilityMap& teacher_on_hard, const Image& hard, const Image& easy,
                                       const HardLabelMask& easy_labels, const PropagationOptions& options,
                                       std::uint64_t seed);

struct PropagationLoss {
  LossValue supervised;   // cross-entropy on the easy image
  LossValue consistency;  // gated consistency on the augmented hard image
  double total = 0.0;
};

/// Evaluates L_ce(M(x_easy), y_easy) + cyc_weight * L_cyc(M(Aug(x_hard)), M'(x_hard))
/// and records both gradients on the tape. `easy` may be null (empty easy
/// split), in which case the supervised term is zero and no mixing happens.
struct EasySample {
  const Image* image = nullptr;
  const HardLabelMask* labels = nullptr;
};

PropagationLoss propagation_objective(SampleTape& tape, const TeacherSnapshot& teacher, const EasySample& easy,
                                      const Image& hard, const PropagationOptions& options, std::uint64_t seed);

/// Same, with the teacher's prediction on the clean hard image precomputed.
PropagationLoss propagation_objective(SampleTape& tape, const ProbabilityMap& teacher_on_hard, const EasySample& easy,
                                      const Image& hard, const PropagationOptions& options, std::uint64_t seed);

}  // namespace atp
