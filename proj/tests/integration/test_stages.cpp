// SPDX-License-Identifier: Apache-2.0
//
// Stage-level checks on the default benchmark. Slower than the unit suite:
// two source warmups, two short aligns and one KD epoch.
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include <spdlog/spdlog.h>

#include "atp/evaluation.hpp"
#include "atp/pipeline.hpp"

using namespace atp;

namespace {

constexpr std::uint64_t kSeed = 1;

struct Warm {
  Benchmark data;
  ATPConfig cfg;
  SegmentationModel model;
};

const Warm& warm() {
  static const Warm w = [] {
    spdlog::set_level(spdlog::level::warn);
    Benchmark data = generate_benchmark(SceneSpec::benchmark_default(), {}, kSeed);
    ATPConfig cfg;
    cfg.seed = kSeed;
    SegmentationModel m = warmup_source(data.source_train, cfg);
    return Warm{std::move(data), cfg, std::move(m)};
  }();
  return w;
}

double term(const EpochLoss& e, const std::string& name) {
  for (const auto& [k, v] : e.terms)
    if (k == name) return v;
  FAIL("missing loss term " << name);
  return 0.0;
}

}  // namespace

TEST_CASE("source model quality and domain gap") {
  const Warm& w = warm();
  const double src = evaluate_model(w.model, w.data.source_eval).miou_or_zero();
  const double tgt = evaluate_model(w.model, w.data.target_eval).miou_or_zero();
  MESSAGE("source-eval " << src << ", target-eval " << tgt);
  CHECK(src >= 0.85);
  CHECK(src - tgt >= 0.15);
}

TEST_CASE("zero-shift pair scores alike on both domains") {
  spdlog::set_level(spdlog::level::warn);
  const Benchmark b = generate_benchmark(SceneSpec::zero_shift(), {}, kSeed);
  ATPConfig cfg;
  cfg.seed = kSeed;
  const SegmentationModel m = warmup_source(b.source_train, cfg);
  const double src = evaluate_model(m, b.source_eval).miou_or_zero();
  const double tgt = evaluate_model(m, b.target_eval).miou_or_zero();
  MESSAGE("source-eval " << src << ", target-eval " << tgt);
  CHECK(std::abs(src - tgt) <= 0.02);
}

TEST_CASE("align lowers its objective without regressing") {
  const Warm& w = warm();
  RunRecord rec;
  const double before = evaluate_model(w.model, w.data.target_eval).miou_or_zero();
  stage_align(w.model, w.data.target_train, w.cfg, {&w.data.target_eval, "", &rec});
  REQUIRE(rec.losses.size() >= 2);
  CHECK(term(rec.losses.back(), "total") < term(rec.losses.front(), "total"));
  CHECK(*rec.stage_miou("align") >= before - 0.01);
}

TEST_CASE("entropy-only align lowers the curriculum term") {
  const Warm& w = warm();
  ATPConfig cfg = w.cfg;
  cfg.align.div_weight = 0.0;
  cfg.align.alpha = 1.0;  // at 0.002 the term sits below the weight-decay pull
  RunRecord rec;
  stage_align(w.model, w.data.target_train, cfg, {nullptr, "", &rec});
  REQUIRE(rec.losses.size() >= 2);
  CHECK(term(rec.losses.back(), "cel") < term(rec.losses.front(), "cel"));
}

TEST_CASE("KD loss trends down over the first warm-start epoch") {
  const Warm& w = warm();
  const auto preds = predict_all(w.model, w.data.target_train);
  ATPConfig cfg = w.cfg;
  cfg.blackbox.kd_epochs = 1;
  RunRecord rec;
  stage_distill(preds, w.data.target_train, cfg, {nullptr, "", &rec});
  const auto& curve = rec.distill_first_epoch;
  REQUIRE(curve.size() >= 10);
  // Non-overlapping window means may not rise by more than kSlack once the
  // curve flattens out.
  constexpr std::size_t kWindow = 5;
  constexpr double kSlack = 0.02;
  std::vector<double> smooth;
  for (std::size_t i = 0; i + kWindow <= curve.size(); i += kWindow)
    smooth.push_back(std::accumulate(curve.begin() + i, curve.begin() + i + kWindow, 0.0) / kWindow);
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] <= smooth[i - 1] + kSlack);
  CHECK(smooth.back() < 0.6 * smooth.front());
}
