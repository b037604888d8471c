// SPDX-License-Identifier: Apache-2.0
//
// Procedural source/target scene generation with a photometric domain shift,
// dataset directories and the binary probability-map store.
#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atp/core_math.hpp"
#include "atp/image.hpp"

namespace atp {

/// Appearance parameters applied on top of the rendered scene.
struct AppearanceShift {
  double hue_degrees = 0.0;   // rotation about the gray axis
  double noise_sigma = 0.0;   // additive Gaussian noise
  int blur_radius = 0;        // box-blur radius in pixels
  double texture_amplitude = 0.0;

  friend bool operator==(const AppearanceShift&, const AppearanceShift&) = default;
};

/// Shape classes after background (class 0), in class-index order.
enum class ShapeKind { kCircle, kRectangle, kTriangle, kRing, kDiamond, kCross };
inline constexpr int kMaxShapeKinds = 6;

struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_classes = 5;  // background + (num_classes - 1) shape kinds
  int min_shapes = 4;
  int max_shapes = 7;
  double min_radius = 10.0;
  double max_radius = 18.0;
  /// Per-class base colors; class 0 is background. Missing entries fall back
  /// to evenly spaced hues.
  std::vector<std::array<float, 3>> palette;
  double color_jitter = 0.1;  // per-instance, per-channel uniform perturbation
  AppearanceShift source;
  AppearanceShift target;

  /// Default desk-scale benchmark: C=5, 64x64, 60 degree hue rotation plus
  /// noise 0.05 and blur radius 1 on the target. Shape colors sit at two
  /// opposite hues and two luminance levels, so the rotated target colors
  /// stay nearest to their own class.
  static SceneSpec benchmark_default();
  /// Same as benchmark_default with no appearance difference between domains.
  static SceneSpec zero_shift();
};

/// JSON (de)serialization; unknown keys are rejected with InvalidInput.
std::string scene_spec_to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const std::string& text);

/// Counts source reads so tests can prove later stages never touch them.
class AccessCounter {
 public:
  AccessCounter() = default;
  AccessCounter(const AccessCounter& other) : count_(other.count()) {}
  AccessCounter& operator=(const AccessCounter& other) {
    count_.store(other.count());
    return *this;
  }
  void bump() const { count_.fetch_add(1, std::memory_order_relaxed); }
  std::size_t count() const { return count_.load(std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::size_t> count_{0};
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Image> images, std::vector<HardLabelMask> labels, int num_classes);

  std::size_t size() const { return images_.size(); }
  int num_classes() const { return num_classes_; }

  const Image& image(std::size_t i) const;
  const HardLabelMask& label(std::size_t i) const;

  /// Number of image()/label() calls made so far.
  std::size_t reads() const { return reads_.count(); }

 private:
  std::vector<Image> images_;
  std::vector<HardLabelMask> labels_;
  int num_classes_ = 0;
  AccessCounter reads_;
};

/// Source and target draws for the same seed. Image i of each domain comes
/// from its own RNG substream, so generation order does not matter.
std::pair<Dataset, Dataset> generate_pair(const SceneSpec& spec, std::size_t n_source, std::size_t n_target,
                                          std::uint64_t seed);

enum class Domain { kSource, kTarget };

/// Renders images [first, first + count) of one domain and stream. Streams
/// separate disjoint splits (train/eval) drawn from the same distribution.
Dataset generate_domain(const SceneSpec& spec, Domain domain, std::uint32_t stream, std::size_t first,
                        std::size_t count, std::uint64_t seed);

struct BenchmarkSizes {
  std::size_t source_train = 200;
  std::size_t source_eval = 50;
  std::size_t target_train = 200;
  std::size_t target_eval = 50;
};

struct Benchmark {
  Dataset source_train;
  Dataset source_eval;
  Dataset target_train;
  Dataset target_eval;
};

Benchmark generate_benchmark(const SceneSpec& spec, const BenchmarkSizes& sizes, std::uint64_t seed);

/// Applies hue rotation, blur, then noise (seeded) in that order.
void apply_shift(Image& image, const AppearanceShift& shift, std::uint64_t noise_seed);

/// Rotates hue about the gray axis by `degrees`, clamping to [0,1].
void rotate_hue(Image& image, double degrees);

/// <dir>/images/%05d.png, <dir>/labels/%05d.png and <dir>/meta.json.
void save_dataset(const Dataset& d, const std::filesystem::path& dir, const SceneSpec* spec = nullptr);
Dataset load_dataset(const std::filesystem::path& dir);

void save_benchmark(const Benchmark& b, const SceneSpec& spec, std::uint64_t seed, const std::filesystem::path& dir);
Benchmark load_benchmark(const std::filesystem::path& dir, bool with_source = true);

/// "ATPF", u32 version=1, u32 count, u32 H, u32 W, u32 C, then
/// count*H*W*C little-endian f32, image-major, row-major, class-minor.
void save_probability_maps(std::span<const ProbabilityMap> maps, const std::filesystem::path& path);
std::vector<ProbabilityMap> load_probability_maps(const std::filesystem::path& path);

/// Quantizes to 8 bits per channel, matching the on-disk representation.
void quantize_8bit(Image& image);

}  // namespace atp
