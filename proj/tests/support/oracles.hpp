// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations shared by the unit and acceptance
// suites. Nothing here calls into the library's numerical code.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "atp/core_math.hpp"

namespace oracle {

inline atp::ProbabilityMap random_map(std::mt19937_64& rng, int h, int w, int c, double sharpness = 2.0) {
  std::normal_distribution<double> n(0.0, sharpness);
  std::vector<double> v(static_cast<std::size_t>(h) * w * c);
  for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px) {
    double total = 0.0;
    for (int k = 0; k < c; ++k) total += v[px * c + k] = std::exp(n(rng));
    for (int k = 0; k < c; ++k) v[px * c + k] /= total;
  }
  return atp::ProbabilityMap(h, w, c, std::move(v));
}

inline std::vector<double> softmax_rows(const std::vector<double>& z, int c) {
  std::vector<double> p(z.size());
  for (std::size_t r = 0; r < z.size() / c; ++r) {
    double m = z[r * c];
    for (int k = 1; k < c; ++k) m = std::max(m, z[r * c + k]);
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += p[r * c + k] = std::exp(z[r * c + k] - m);
    for (int k = 0; k < c; ++k) p[r * c + k] /= s;
  }
  return p;
}

/// Central differences of f(softmax(z)) with respect to z.
inline std::vector<double> numeric_logit_gradient(const std::function<double(const atp::ProbabilityMap&)>& f,
                                                  std::vector<double> z, int h, int w, int c, double step = 1e-4) {
  std::vector<double> g(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double keep = z[i];
    z[i] = keep + step;
    const double up = f(atp::ProbabilityMap(h, w, c, softmax_rows(z, c)));
    z[i] = keep - step;
    const double down = f(atp::ProbabilityMap(h, w, c, softmax_rows(z, c)));
    z[i] = keep;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
  return std::sqrt(diff) / denom;
}

/// Selected-per-class counts from sorting every class's argmax confidences.
inline std::vector<std::size_t> topk_counts(const std::vector<atp::ProbabilityMap>& maps, double K) {
  const int c = maps.front().num_classes();
  std::vector<std::vector<double>> conf(c);
  for (const auto& m : maps)
    for (std::size_t px = 0; px < m.pixels(); ++px) {
      const auto p = m.pixel(px);
      int best = 0;
      for (int k = 1; k < c; ++k)
        if (p[k] > p[best]) best = k;
      conf[best].push_back(p[best]);
    }
  std::vector<std::size_t> out(c);
  for (int k = 0; k < c; ++k) out[k] = static_cast<std::size_t>(std::floor(K * static_cast<double>(conf[k].size())));
  return out;
}

/// IoU by explicit pixel sets: |pred=c and gt=c| / |pred=c or gt=c| over
/// non-IGNORE ground truth.
struct SetIoU {
  std::vector<std::uint64_t> inter, uni;
};

inline SetIoU set_iou(const std::vector<std::vector<std::uint8_t>>& preds, const std::vector<std::vector<std::uint8_t>>& gts,
                      int c) {
  SetIoU r{std::vector<std::uint64_t>(c, 0), std::vector<std::uint64_t>(c, 0)};
  for (int k = 0; k < c; ++k) {
    std::uint64_t offset = 0;
    std::set<std::uint64_t> in_pred, in_gt;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      for (std::size_t px = 0; px < preds[i].size(); ++px) {
        if (gts[i][px] == atp::kIgnore) continue;
        if (preds[i][px] == k) in_pred.insert(offset + px);
        if (gts[i][px] == k) in_gt.insert(offset + px);
      }
      offset += preds[i].size();
    }
    std::vector<std::uint64_t> both;
    std::set_intersection(in_pred.begin(), in_pred.end(), in_gt.begin(), in_gt.end(), std::back_inserter(both));
    std::set<std::uint64_t> either = in_pred;
    either.insert(in_gt.begin(), in_gt.end());
    r.inter[k] = both.size();
    r.uni[k] = either.size();
  }
  return r;
}

}  // namespace oracle
