// SPDX-License-Identifier: Apache-2.0
#include "atp/propagation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "atp/error.hpp"
#include "rng.hpp"

namespace atp {

bool SplitAssignment::is_easy(std::size_t id) const {
  return std::find(easy_ids.begin(), easy_ids.end(), id) != easy_ids.end();
}

double rank_image(const ProbabilityMap& p) {
  const EntropyMap h = compute_entropy_map(p);
  if (h.values.empty()) return 0.0;
  const double mean = std::accumulate(h.values.begin(), h.values.end(), 0.0) / static_cast<double>(h.values.size());
  return std::clamp(mean, 0.0, 1.0);
}

SplitAssignment split_dataset(std::span<const double> scores, double ratio) {
  if (scores.empty()) throw InvalidInput("cannot split an empty score list");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidInput("split ratio must lie in (0, 1]");
  SplitAssignment out;
  out.scores.assign(scores.begin(), scores.end());
  out.ratio = ratio;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  const auto n_easy = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(scores.size())));
  out.easy_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_easy));
  out.hard_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_easy), order.end());
  return out;
}

std::string split_manifest(const SplitAssignment& split) {
  std::vector<char> easy(split.scores.size(), 0);
  for (auto id : split.easy_ids) easy[id] = 1;
  std::string text;
  char buf[64];
  for (std::size_t i = 0; i < split.scores.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9f,%s\n", i, split.scores[i], easy[i] ? "easy" : "hard");
    text += buf;
  }
  return text;
}

void write_split_manifest(const SplitAssignment& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << split_manifest(split);
  if (!out) throw IoError("failed writing " + path.string());
}

AugmentationOp AugmentationOp::color_jitter(double brightness, double contrast, double saturation) {
  AugmentationOp op;
  op.kind = AugmentationKind::kColorJitter;
  op.brightness = brightness;
  op.contrast = contrast;
  op.saturation = saturation;
  return op;
}

AugmentationOp AugmentationOp::gaussian_blur(double sigma) {
  AugmentationOp op;
  op.kind = AugmentationKind::kGaussianBlur;
  op.blur_sigma = sigma;
  return op;
}

MixResult classmix(const Image& img_a, const HardLabelMask& labels_a, const Image& img_b, std::uint64_t seed,
                   bool paste_all) {
  if (img_a.height != img_b.height || img_a.width != img_b.width || labels_a.height != img_a.height ||
      labels_a.width != img_a.width)
    throw InvalidInput("classmix inputs differ in shape");
  std::vector<int> present;
  {
    std::array<bool, 256> seen{};
    for (auto l : labels_a.labels)
      if (l != kIgnore) seen[l] = true;
    for (int c = 0; c < 255; ++c)
      if (seen[c]) present.push_back(c);
  }
  std::vector<int> selected = present;
  if (!paste_all) {
    std::mt19937_64 rng(rng::mix(seed, 0x436c6173734d6978ULL));
    std::shuffle(selected.begin(), selected.end(), rng);
    selected.resize(present.size() / 2);
    std::sort(selected.begin(), selected.end());
  }
  std::array<bool, 256> take{};
  for (int c : selected) take[c] = true;

  MixResult out{img_b, HardLabelMask(img_b.height, img_b.width), std::vector<std::uint8_t>(img_b.plane(), 0),
                selected};
  const std::size_t plane = img_b.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    const auto l = labels_a.labels[i];
    if (l == kIgnore || !take[l]) continue;
    out.pasted[i] = 1;
    out.labels.labels[i] = l;
    for (int c = 0; c < 3; ++c) out.image.data[c * plane + i] = img_a.data[c * plane + i];
  }
  return out;
}

namespace {

void clamp_unit(Image& img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

float luma(const Image& img, std::size_t i) {
  const std::size_t plane = img.plane();
  return 0.299f * img.data[i] + 0.587f * img.data[plane + i] + 0.114f * img.data[2 * plane + i];
}

Image jitter(const Image& img, const AugmentationOp& op, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto factor = [&](double s) {
    std::uniform_real_distribution<double> d(std::max(0.0, 1.0 - s), 1.0 + s);
    return s > 0.0 ? static_cast<float>(d(rng)) : 1.0f;
  };
  const float b = factor(op.brightness);
  const float c = factor(op.contrast);
  const float s = factor(op.saturation);
  Image out = img;
  const std::size_t plane = out.plane();
  if (b != 1.0f) {
    for (auto& v : out.data) v *= b;
    clamp_unit(out);
  }
  if (c != 1.0f) {
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += luma(out, i);
    const auto m = static_cast<float>(mean / static_cast<double>(plane));
    for (auto& v : out.data) v = (v - m) * c + m;
    clamp_unit(out);
  }
  if (s != 1.0f) {
    for (std::size_t i = 0; i < plane; ++i) {
      const float g = luma(out, i);
      for (int ch = 0; ch < 3; ++ch) {
        float& v = out.data[ch * plane + i];
        v = (v - g) * s + g;
      }
    }
    clamp_unit(out);
  }
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) total += kernel[k + radius] = static_cast<float>(std::exp(-0.5 * k * k / (sigma * sigma)));
  for (auto& w : kernel) w = static_cast<float>(w / total);

  const int h = img.height, w = img.width;
  Image tmp(h, w), out(h, w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img.at(c, y, std::clamp(x + k, 0, w - 1));
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(c, std::clamp(y + k, 0, h - 1), x);
        out.at(c, y, x) = acc;
      }
  }
  clamp_unit(out);
  return out;
}

}  // namespace

Image photometric_augment(const Image& img, const AugmentationOp& op, std::uint64_t seed) {
  switch (op.kind) {
    case AugmentationKind::kColorJitter:
      return jitter(img, op, seed);
    case AugmentationKind::kGaussianBlur:
      return gaussian_blur(img, op.blur_sigma);
    case AugmentationKind::kClassMix:
      break;
  }
  throw InvalidInput("classmix is not a photometric augmentation");
}

ConsistencyPair build_consistency_pair(const ProbabilityMap& teacher_on_hard, const Image& hard, const Image& easy,
                                       const HardLabelMask& easy_labels, const PropagationOptions& options,
                                       std::uint64_t seed) {
  if (teacher_on_hard.height() != hard.height || teacher_on_hard.width() != hard.width)
    throw InvalidInput("teacher map does not match the hard image");
  MixResult mix = classmix(easy, easy_labels, hard, rng::mix(seed, 0));
  ConsistencyPair pair{std::move(mix.image), teacher_on_hard};
  const int classes = teacher_on_hard.num_classes();
  for (std::size_t i = 0; i < mix.pasted.size(); ++i) {
    if (!mix.pasted[i]) continue;
    const int l = mix.labels.labels[i];
    if (l >= classes) throw InvalidInput("easy label exceeds the class count");
    auto px = pair.target.pixel(i);
    std::fill(px.begin(), px.end(), 0.0);
    px[l] = 1.0;
  }
  for (std::size_t k = 0; k < options.photometric.size(); ++k)
    pair.student_input = photometric_augment(pair.student_input, options.photometric[k], rng::mix(seed, k + 1));
  return pair;
}

PropagationLoss propagation_objective(SampleTape& tape, const TeacherSnapshot& teacher, const EasySample& easy,
                                      const Image& hard, const PropagationOptions& options, std::uint64_t seed) {
  return propagation_objective(tape, teacher.forward(hard), easy, hard, options, seed);
}

PropagationLoss propagation_objective(SampleTape& tape, const ProbabilityMap& teacher_on_hard, const EasySample& easy,
                                      const Image& hard, const PropagationOptions& options, std::uint64_t seed) {
  PropagationLoss loss;
  ConsistencyPair pair;
  if (easy.image && easy.labels) {
    const ProbabilityMap p = tape.forward(*easy.image);
    std::vector<double> grad(p.values().size(), 0.0);
    loss.supervised = cross_entropy_loss(p, *easy.labels, grad);
    if (loss.supervised.contributing_pixels > 0) tape.backward(grad);
    pair = build_consistency_pair(teacher_on_hard, hard, *easy.image, *easy.labels, options, seed);
  } else {
    pair.student_input = hard;
    pair.target = teacher_on_hard;
    for (std::size_t k = 0; k < options.photometric.size(); ++k)
      pair.student_input = photometric_augment(pair.student_input, options.photometric[k], rng::mix(seed, k + 1));
  }
  const ProbabilityMap ps = tape.forward(pair.student_input);
  std::vector<double> grad(ps.values().size(), 0.0);
  loss.consistency = consistency_loss(pair.target, ps, {}, grad, options.cyc_weight, options.confidence_gate);
  if (loss.consistency.contributing_pixels > 0 && options.cyc_weight != 0.0) tape.backward(grad);
  loss.total = loss.supervised.value + options.cyc_weight * loss.consistency.value;
  return loss;
}

}  // namespace atp
