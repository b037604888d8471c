// SPDX-License-Identifier: Apache-2.0
#include "atp/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "atp/error.hpp"

namespace atp {

namespace {

void check_grad(std::span<double> grad, const ProbabilityMap& p) {
  if (!grad.empty() && grad.size() != p.values().size())
    throw InvalidInput("gradient buffer size " + std::to_string(grad.size()) + " does not match map size " +
                       std::to_string(p.values().size()));
}

void check_classes(const ProbabilityMap& p) {
  if (p.num_classes() < 2) throw InvalidInput("probability map needs at least 2 classes");
}

// Normalized entropy of one pixel.
double pixel_entropy(std::span<const double> probs, double inv_log_c) {
  double h = 0.0;
  for (double v : probs) h -= v * std::log(v + kLogEpsilon);
  return std::clamp(h * inv_log_c, 0.0, 1.0);
}

// dh/dp_c for the normalized entropy.
double entropy_partial(double v, double inv_log_c) {
  return -(std::log(v + kLogEpsilon) + v / (v + kLogEpsilon)) * inv_log_c;
}

}  // namespace

ProbabilityMap::ProbabilityMap(int height, int width, int num_classes)
    : height_(height),
      width_(width),
      classes_(num_classes),
      values_(static_cast<std::size_t>(height) * width * num_classes, 0.0) {
  if (height <= 0 || width <= 0 || num_classes <= 0) throw InvalidInput("probability map dimensions must be positive");
}

ProbabilityMap::ProbabilityMap(int height, int width, int num_classes, std::vector<double> values)
    : height_(height), width_(width), classes_(num_classes), values_(std::move(values)) {
  if (height <= 0 || width <= 0 || num_classes <= 0) throw InvalidInput("probability map dimensions must be positive");
  if (values_.size() != static_cast<std::size_t>(height) * width * num_classes)
    throw InvalidInput("probability map buffer has " + std::to_string(values_.size()) + " entries, expected " +
                       std::to_string(static_cast<std::size_t>(height) * width * num_classes));
}

void ProbabilityMap::validate() const {
  for (std::size_t i = 0; i < pixels(); ++i) {
    double sum = 0.0;
    for (double v : pixel(i)) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("probability outside [0,1] at pixel " + std::to_string(i));
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-5) throw InvalidInput("probabilities do not sum to 1 at pixel " + std::to_string(i));
  }
}

ProbabilityMap softmax(std::span<const double> logits, int height, int width, int num_classes) {
  ProbabilityMap p(height, width, num_classes);
  if (logits.size() != p.values().size()) throw InvalidInput("logit buffer does not match map shape");
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto z = logits.subspan(i * num_classes, num_classes);
    auto out = p.pixel(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (int c = 0; c < num_classes; ++c) sum += out[c] = std::exp(z[c] - zmax);
    for (auto& v : out) v /= sum;
  }
  return p;
}

void softmax_backward(const ProbabilityMap& p, std::span<const double> grad_p, std::span<double> grad_logits) {
  const int classes = p.num_classes();
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto prob = p.pixel(i);
    auto g = grad_p.subspan(i * classes, classes);
    double dot = 0.0;
    for (int c = 0; c < classes; ++c) dot += prob[c] * g[c];
    for (int c = 0; c < classes; ++c) grad_logits[i * classes + c] = prob[c] * (g[c] - dot);
  }
}

int argmax(std::span<const double> probs) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(probs.size()); ++c)
    if (probs[c] > probs[best]) best = c;
  return best;
}

EntropyMap compute_entropy_map(const ProbabilityMap& p) {
  check_classes(p);
  const double inv_log_c = 1.0 / std::log(static_cast<double>(p.num_classes()));
  EntropyMap e{p.height(), p.width(), std::vector<double>(p.pixels())};
  for (std::size_t i = 0; i < p.pixels(); ++i) e.values[i] = pixel_entropy(p.pixel(i), inv_log_c);
  return e;
}

LossValue curriculum_entropy_loss(const ProbabilityMap& p, double alpha, double gamma, std::span<double> grad,
                                  double scale) {
  check_classes(p);
  check_grad(grad, p);
  if (!(alpha > 0.0)) throw InvalidInput("alpha must be positive");
  if (!(gamma >= 0.0)) throw InvalidInput("gamma must be non-negative");
  const int classes = p.num_classes();
  const double inv_log_c = 1.0 / std::log(static_cast<double>(classes));
  const double inv_n = 1.0 / static_cast<double>(p.pixels());
  double total = 0.0;
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto prob = p.pixel(i);
    const double h = pixel_entropy(prob, inv_log_c);
    const double rest = std::max(0.0, 1.0 - h);
    total += alpha * std::pow(rest, gamma) * h;
    if (grad.empty()) continue;
    // d/dh [(1-h)^g h] = (1-h)^g - g (1-h)^(g-1) h
    double dterm = std::pow(rest, gamma);
    if (gamma != 0.0 && rest > 0.0) dterm -= gamma * std::pow(rest, gamma - 1.0) * h;
    const double coef = scale * alpha * dterm * inv_n;
    for (int c = 0; c < classes; ++c) grad[i * classes + c] += coef * entropy_partial(prob[c], inv_log_c);
  }
  return {total * inv_n, p.pixels()};
}

LossValue weighted_diversity_loss(const ProbabilityMap& p, double lambda_w, std::span<double> grad, double scale) {
  check_classes(p);
  check_grad(grad, p);
  if (!(lambda_w >= 0.0)) throw InvalidInput("lambda_w must be non-negative");
  const int classes = p.num_classes();
  const double inv_log_c = 1.0 / std::log(static_cast<double>(classes));

  std::vector<double> weight(p.pixels());
  std::vector<double> mean(classes, 0.0);
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto prob = p.pixel(i);
    weight[i] = std::exp(-lambda_w * pixel_entropy(prob, inv_log_c));
    weight_sum += weight[i];
    for (int c = 0; c < classes; ++c) mean[c] += weight[i] * prob[c];
  }
  for (auto& m : mean) m /= weight_sum;

  double value = 0.0;
  std::vector<double> dmean(classes);
  for (int c = 0; c < classes; ++c) {
    value += mean[c] * std::log(mean[c] + kLogEpsilon);
    dmean[c] = std::log(mean[c] + kLogEpsilon) + mean[c] / (mean[c] + kLogEpsilon);
  }

  if (!grad.empty()) {
    for (std::size_t i = 0; i < p.pixels(); ++i) {
      auto prob = p.pixel(i);
      const double w = weight[i] / weight_sum;
      // Sensitivity of the loss to this pixel's (unnormalized) weight.
      double dweight = 0.0;
      for (int c = 0; c < classes; ++c) dweight += dmean[c] * (prob[c] - mean[c]);
      const double via_entropy = dweight * w * -lambda_w;
      for (int c = 0; c < classes; ++c)
        grad[i * classes + c] += scale * (dmean[c] * w + via_entropy * entropy_partial(prob[c], inv_log_c));
    }
  }
  return {value, p.pixels()};
}

LossValue cross_entropy_loss(const ProbabilityMap& p, const HardLabelMask& labels, std::span<double> grad,
                             double scale) {
  check_grad(grad, p);
  if (labels.height != p.height() || labels.width != p.width())
    throw InvalidInput("label mask shape does not match probability map");
  const int classes = p.num_classes();
  std::size_t count = 0;
  for (auto l : labels.labels) {
    if (l == kIgnore) continue;
    if (l >= classes) throw InvalidInput("label " + std::to_string(l) + " outside class range");
    ++count;
  }
  if (count == 0) return {0.0, 0};
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    const auto l = labels.labels[i];
    if (l == kIgnore) continue;
    const double v = p.pixel(i)[l];
    total -= std::log(v + kLogEpsilon);
    if (!grad.empty()) grad[i * classes + l] -= scale * inv / (v + kLogEpsilon);
  }
  return {total * inv, count};
}

LossValue negative_pseudo_loss(const ProbabilityMap& p, const NegativeLabelMask& neg, std::span<double> grad,
                               double scale) {
  check_grad(grad, p);
  if (neg.height != p.height() || neg.width != p.width() || neg.num_classes != p.num_classes())
    throw InvalidInput("negative mask shape does not match probability map");
  const int classes = p.num_classes();
  std::size_t count = 0;
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto f = neg.pixel(i);
    if (std::any_of(f.begin(), f.end(), [](auto v) { return v != 0; })) ++count;
  }
  if (count == 0) return {0.0, 0};
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    auto f = neg.pixel(i);
    auto prob = p.pixel(i);
    for (int c = 0; c < classes; ++c) {
      if (!f[c]) continue;
      const double rest = 1.0 - prob[c] + kLogEpsilon;
      total -= std::log(rest);
      if (!grad.empty()) grad[i * classes + c] += scale * inv / rest;
    }
  }
  return {total * inv, count};
}

LossValue bidirectional_loss(const LossValue& ppl, const LossValue& npl) {
  if (!std::isfinite(ppl.value) || !std::isfinite(npl.value)) throw InvalidInput("non-finite loss term");
  return {ppl.value + npl.value, ppl.contributing_pixels + npl.contributing_pixels};
}

LossValue kd_loss(const ProbabilityMap& teacher, const ProbabilityMap& student, std::span<double> grad,
                  double scale) {
  check_grad(grad, student);
  if (!teacher.same_shape(student)) throw InvalidInput("teacher and student maps differ in shape");
  const int classes = student.num_classes();
  const double inv_n = 1.0 / static_cast<double>(student.pixels());
  double total = 0.0;
  for (std::size_t i = 0; i < student.pixels(); ++i) {
    auto t = teacher.pixel(i);
    auto s = student.pixel(i);
    for (int c = 0; c < classes; ++c) {
      total += t[c] * std::log((t[c] + kLogEpsilon) / (s[c] + kLogEpsilon));
      if (!grad.empty()) grad[i * classes + c] -= scale * inv_n * t[c] / (s[c] + kLogEpsilon);
    }
  }
  return {total * inv_n, student.pixels()};
}

HardLabelMask gated_pseudo_labels(const ProbabilityMap& teacher, double gate) {
  HardLabelMask labels(teacher.height(), teacher.width());
  for (std::size_t i = 0; i < teacher.pixels(); ++i) {
    auto prob = teacher.pixel(i);
    const int c = argmax(prob);
    if (prob[c] >= gate) labels.labels[i] = static_cast<std::uint8_t>(c);
  }
  return labels;
}

LossValue consistency_loss(const ProbabilityMap& teacher, const ProbabilityMap& student,
                           std::span<const std::uint8_t> confidence_mask, std::span<double> grad, double scale,
                           double gate) {
  if (!teacher.same_shape(student)) throw InvalidInput("teacher and student maps differ in shape");
  if (!confidence_mask.empty() && confidence_mask.size() != student.pixels())
    throw InvalidInput("confidence mask shape does not match probability map");
  HardLabelMask labels = gated_pseudo_labels(teacher, gate);
  if (!confidence_mask.empty())
    for (std::size_t i = 0; i < labels.pixels(); ++i)
      if (!confidence_mask[i]) labels.labels[i] = kIgnore;
  return cross_entropy_loss(student, labels, grad, scale);
}

}  // namespace atp
