// SPDX-License-Identifier: Apache-2.0
#include "atp/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "atp/error.hpp"
#include "atp/model.hpp"
#include "atp/parallel.hpp"
#include "atp/propagation.hpp"
#include "atp/synthetic_data.hpp"

namespace atp {

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw InvalidInput("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

void accumulate_confusion(const HardLabelMask& pred, const HardLabelMask& gt, ConfusionMatrix& confusion) {
  if (pred.height != gt.height || pred.width != gt.width) throw InvalidInput("prediction and ground truth differ in shape");
  const int classes = confusion.num_classes();
  for (std::size_t i = 0; i < gt.pixels(); ++i) {
    const auto truth = gt.labels[i];
    if (truth == kIgnore) continue;
    const auto guess = pred.labels[i];
    if (truth >= classes || guess >= classes)
      throw InvalidInput("class index out of range at pixel " + std::to_string(i));
    ++confusion.at(truth, guess);
  }
}

IoUReport compute_miou(const ConfusionMatrix& confusion) {
  const int classes = confusion.num_classes();
  IoUReport report{confusion, std::vector<double>(classes, 0.0), {}, std::nullopt};
  double sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int k = 0; k < classes; ++k) {
      row += confusion.at(c, k);
      col += confusion.at(k, c);
    }
    const std::uint64_t tp = confusion.at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    report.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    report.valid_classes.push_back(c);
    sum += report.per_class_iou[c];
  }
  if (!report.valid_classes.empty()) report.miou = sum / static_cast<double>(report.valid_classes.size());
  return report;
}

HardLabelMask predict_labels(const ProbabilityMap& p) {
  HardLabelMask out(p.height(), p.width());
  for (std::size_t i = 0; i < p.pixels(); ++i) out.labels[i] = static_cast<std::uint8_t>(argmax(p.pixel(i)));
  return out;
}

IoUReport evaluate_model(const SegmentationModel& model, const Dataset& data) {
  std::vector<ConfusionMatrix> parts(data.size(), ConfusionMatrix(model.num_classes()));
  parallel_for(data.size(), [&](std::size_t i) {
    accumulate_confusion(predict_labels(model.forward(data.image(i))), data.label(i), parts[i]);
  });
  ConfusionMatrix total(model.num_classes());
  for (const auto& p : parts) total += p;
  return compute_miou(total);
}

EntropySummary entropy_statistics(std::span<const ProbabilityMap> maps, int bins) {
  if (bins < 1) throw InvalidInput("histogram needs at least one bin");
  EntropySummary s;
  s.histogram.assign(bins, 0);
  for (const auto& m : maps) {
    const double r = rank_image(m);
    s.scores.push_back(r);
    const int b = std::min(bins - 1, static_cast<int>(r * bins));
    ++s.histogram[std::max(0, b)];
  }
  if (s.scores.empty()) return s;
  s.mean = std::accumulate(s.scores.begin(), s.scores.end(), 0.0) / static_cast<double>(s.scores.size());
  std::vector<double> sorted = s.scores;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return s;
}

}  // namespace atp
