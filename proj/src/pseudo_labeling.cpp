// SPDX-License-Identifier: Apache-2.0
#include "atp/pseudo_labeling.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <string>

#include <spdlog/spdlog.h>

#include "atp/error.hpp"
#include "atp/image_io.hpp"

namespace atp {

LabelingStats& LabelingStats::operator+=(const LabelingStats& other) {
  if (selected.empty()) {
    *this = other;
    return *this;
  }
  const double ignored = ignore_fraction * total_pixels + other.ignore_fraction * other.total_pixels;
  total_pixels += other.total_pixels;
  for (std::size_t c = 0; c < selected.size(); ++c) {
    selected[c] += other.selected[c];
    negative_flags[c] += other.negative_flags[c];
    fraction[c] = total_pixels ? static_cast<double>(selected[c]) / total_pixels : 0.0;
  }
  ignore_fraction = total_pixels ? ignored / total_pixels : 0.0;
  return *this;
}

ClassThresholds compute_class_thresholds(std::span<const ProbabilityMap* const> maps, double K) {
  if (maps.empty()) throw InvalidInput("compute_class_thresholds needs at least one probability map");
  if (!(K > 0.0 && K <= 1.0)) throw InvalidInput("K must lie in (0, 1]");
  const int classes = maps.front()->num_classes();
  std::vector<std::vector<double>> scores(classes);
  for (const ProbabilityMap* map : maps) {
    if (map->num_classes() != classes) throw InvalidInput("probability maps disagree on class count");
    for (std::size_t i = 0; i < map->pixels(); ++i) {
      auto prob = map->pixel(i);
      const int c = argmax(prob);
      scores[c].push_back(prob[c]);
    }
  }

  ClassThresholds out{std::vector<double>(classes, 0.0), std::vector<std::size_t>(classes, 0)};
  for (int c = 0; c < classes; ++c) {
    auto& s = scores[c];
    const std::size_t n = s.size();
    out.counts[c] = n;
    if (n == 0) continue;
    const auto k = static_cast<std::size_t>(std::floor(K * static_cast<double>(n)));
    if (k >= n) continue;
    // (k+1)-th largest value
    std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end(), std::greater<>());
    out.values[c] = s[k];
  }
  return out;
}

ClassThresholds compute_class_thresholds(std::span<const ProbabilityMap> maps, double K) {
  std::vector<const ProbabilityMap*> ptrs;
  ptrs.reserve(maps.size());
  for (const auto& m : maps) ptrs.push_back(&m);
  return compute_class_thresholds(std::span<const ProbabilityMap* const>(ptrs), K);
}

HardLabelMask assign_positive_labels(const ProbabilityMap& p, const ClassThresholds& thresholds) {
  if (thresholds.num_classes() != p.num_classes()) throw InvalidInput("threshold count does not match class count");
  HardLabelMask mask(p.height(), p.width());
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto prob = p.pixel(i);
    const int c = argmax(prob);
    if (prob[c] > thresholds.values[c]) mask.labels[i] = static_cast<std::uint8_t>(c);
  }
  return mask;
}

NegativeLabelMask assign_negative_labels(const ProbabilityMap& p, double lambda_neg) {
  if (lambda_neg >= 1.0 / p.num_classes()) {
    // Once per distinct value; this runs every training iteration.
    static std::atomic<double> last_warned{-1.0};
    if (last_warned.exchange(lambda_neg) != lambda_neg)
      spdlog::warn("lambda_neg {} >= 1/C; uniform pixels can never be flagged", lambda_neg);
  }
  NegativeLabelMask neg(p.height(), p.width(), p.num_classes());
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto prob = p.pixel(i);
    auto flags = neg.pixel(i);
    const int top = argmax(prob);
    for (int c = 0; c < p.num_classes(); ++c) flags[c] = (c != top && prob[c] < lambda_neg) ? 1 : 0;
  }
  return neg;
}

LabelingStats labeling_stats(const HardLabelMask& mask, const NegativeLabelMask& neg) {
  if (neg.height != mask.height || neg.width != mask.width) throw InvalidInput("mask shapes disagree");
  const int classes = neg.num_classes;
  LabelingStats stats;
  stats.selected.assign(classes, 0);
  stats.fraction.assign(classes, 0.0);
  stats.negative_flags.assign(classes, 0);
  stats.total_pixels = mask.pixels();
  std::size_t ignored = 0;
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    const auto l = mask.labels[i];
    if (l == kIgnore) {
      ++ignored;
    } else {
      if (l >= classes) throw InvalidInput("label outside class range");
      ++stats.selected[l];
    }
    auto f = neg.pixel(i);
    for (int c = 0; c < classes; ++c) stats.negative_flags[c] += f[c];
  }
  if (stats.total_pixels > 0) {
    for (int c = 0; c < classes; ++c) stats.fraction[c] = static_cast<double>(stats.selected[c]) / stats.total_pixels;
    stats.ignore_fraction = static_cast<double>(ignored) / stats.total_pixels;
  }
  return stats;
}

void export_label_mask(const HardLabelMask& mask, const std::filesystem::path& path) {
  write_png_gray(path, mask.width, mask.height, mask.labels);
}

}  // namespace atp
