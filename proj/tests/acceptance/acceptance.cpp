// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: criteria 1-12, one PASS/FAIL line each. The empirical
// criteria share one set of runs on three seeds of the default benchmark.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "atp/evaluation.hpp"
#include "atp/pipeline.hpp"
#include "atp/propagation.hpp"
#include "atp/pseudo_labeling.hpp"
#include "atp/synthetic_data.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace atp;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradBudgetSec = 10.0;
constexpr double kLabelerBudgetSec = 30.0;
constexpr double kMinAdaptGain = 0.10;
constexpr double kPipelineBudgetSec = 30.0 * 60.0;
constexpr double kStepTolerance = 0.01;
constexpr double kNplTolerance = 0.005;
constexpr double kMinBlackBoxGain = 0.05;
constexpr double kDeterminismTol = 1e-6;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};
const std::vector<double> kLambdaSweep = {0.01, 0.05, 0.1, 0.15, 0.2};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += fmt::format("{}{:.4f}", s.empty() ? "" : " ", x);
  return s;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, Outcome> results;

void report(int id, const std::string& name, Outcome o) {
  std::printf("criterion %2d %-34s %s  %s\n", id, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
  results[id] = std::move(o);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 1 ---------------------------------------------------------------------------
Outcome loss_gradients() {
  const auto t0 = Clock::now();
  constexpr int H = 4, W = 4, C = 3;
  std::mt19937_64 rng(101);
  std::normal_distribution<double> nz(0.0, 1.5);
  double worst = 0.0;
  std::string worst_name;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> z(H * W * C);
    for (auto& v : z) v = nz(rng);
    const ProbabilityMap p = softmax(z, H, W, C);
    HardLabelMask labels(H, W);
    NegativeLabelMask neg(H, W, C);
    std::uniform_int_distribution<int> cls(0, C), bit(0, 1);
    for (auto& l : labels.labels) {
      const int v = cls(rng);
      l = v == C ? kIgnore : static_cast<std::uint8_t>(v);
    }
    for (auto& f : neg.flags) f = static_cast<std::uint8_t>(bit(rng));
    const ProbabilityMap teacher = oracle::random_map(rng, H, W, C);

    const std::vector<std::pair<std::string, std::function<double(const ProbabilityMap&, std::span<double>)>>> losses = {
        {"cel", [](const ProbabilityMap& q, std::span<double> g) { return curriculum_entropy_loss(q, 0.002, 3.0, g).value; }},
        {"div", [](const ProbabilityMap& q, std::span<double> g) { return weighted_diversity_loss(q, 3.0, g).value; }},
        {"ce", [&](const ProbabilityMap& q, std::span<double> g) { return cross_entropy_loss(q, labels, g).value; }},
        {"npl", [&](const ProbabilityMap& q, std::span<double> g) { return negative_pseudo_loss(q, neg, g).value; }},
        {"kd", [&](const ProbabilityMap& q, std::span<double> g) { return kd_loss(teacher, q, g).value; }}};
    for (const auto& [name, loss] : losses) {
      std::vector<double> gp(p.values().size(), 0.0), gz(gp.size());
      loss(p, gp);
      softmax_backward(p, gp, gz);
      const auto numeric = oracle::numeric_logit_gradient([&](const ProbabilityMap& q) { return loss(q, {}); }, z, H, W, C);
      const double err = oracle::relative_error(gz, numeric);
      if (err > worst) worst = err, worst_name = name;
    }
  }
  const double secs = since(t0);
  return {worst < kGradRelTol && secs < kGradBudgetSec,
          fmt::format("max rel err {:.2e} ({}), {:.2f}s", worst, worst_name, secs)};
}

// 2 ---------------------------------------------------------------------------
Outcome worked_negative_example() {
  const NegativeLabelMask m = assign_negative_labels(ProbabilityMap(1, 1, 4, {0.48, 0.47, 0.02, 0.03}), 0.05);
  const std::vector<std::uint8_t> expect{0, 0, 1, 1};
  return {m.flags == expect, fmt::format("flags [{},{},{},{}]", m.flags[0], m.flags[1], m.flags[2], m.flags[3])};
}

// 3 ---------------------------------------------------------------------------
Outcome labeler_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  std::vector<ProbabilityMap> maps;
  for (int i = 0; i < 200; ++i) maps.push_back(oracle::random_map(rng, 32, 32, 5));
  bool ok = true;
  std::size_t total = 0;
  for (double K : {0.1, 0.35, 0.65, 0.9, 1.0}) {
    const ClassThresholds t = compute_class_thresholds(maps, K);
    std::vector<std::size_t> got(5, 0);
    for (const auto& m : maps)
      for (auto l : assign_positive_labels(m, t).labels)
        if (l != kIgnore) ++got[l];
    ok = ok && got == oracle::topk_counts(maps, K);
    for (auto g : got) total += g;
  }
  const double secs = since(t0);
  return {ok && secs < kLabelerBudgetSec, fmt::format("200 maps, 5 K values, {} labels checked, {:.2f}s", total, secs)};
}

// 4 ---------------------------------------------------------------------------
Outcome split_invariants() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> len(1, 300), coarse(0, 19);
  std::uniform_real_distribution<double> ratio(0.01, 1.0), fine(0.0, 1.0);
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(len(rng));
    const bool ties = t % 2 == 0;
    for (auto& v : s) v = ties ? coarse(rng) / 20.0 : fine(rng);
    const double r = ratio(rng);
    const SplitAssignment a = split_dataset(s, r);
    // Brute force: sort (score, id) pairs and take the prefix.
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t i = 0; i < s.size(); ++i) order.emplace_back(s[i], i);
    std::sort(order.begin(), order.end());
    const auto n_easy = static_cast<std::size_t>(std::llround(r * static_cast<double>(s.size())));
    std::vector<std::size_t> easy, hard;
    for (std::size_t i = 0; i < order.size(); ++i) (i < n_easy ? easy : hard).push_back(order[i].second);
    std::vector<int> cover(s.size(), 0);
    for (auto i : a.easy_ids) ++cover[i];
    for (auto i : a.hard_ids) ++cover[i];
    const bool disjoint_cover = std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; });
    double max_easy = -1.0, min_hard = 2.0;
    for (auto i : a.easy_ids) max_easy = std::max(max_easy, s[i]);
    for (auto i : a.hard_ids) min_hard = std::min(min_hard, s[i]);
    if (a.easy_ids.size() != n_easy || !disjoint_cover || max_easy > min_hard || a.easy_ids != easy || a.hard_ids != hard)
      ++bad;
  }
  return {bad == 0, fmt::format("1000 vectors, {} violations", bad)};
}

// 5 ---------------------------------------------------------------------------
Outcome miou_oracle() {
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<int> classes(2, 6);
  int bad = 0;
  for (int t = 0; t < 500; ++t) {
    const int c = classes(rng);
    std::uniform_int_distribution<int> d(0, c);
    HardLabelMask pred(8, 8), gt(8, 8);
    for (auto& l : pred.labels) l = static_cast<std::uint8_t>(d(rng) % c);
    for (auto& l : gt.labels) {
      const int v = d(rng);
      l = v == c ? kIgnore : static_cast<std::uint8_t>(v);
    }
    ConfusionMatrix cm(c);
    accumulate_confusion(pred, gt, cm);
    const IoUReport r = compute_miou(cm);
    const auto ref = oracle::set_iou({pred.labels}, {gt.labels}, c);
    double sum = 0.0;
    int valid = 0;
    for (int k = 0; k < c; ++k) {
      std::uint64_t fp = 0, fn = 0;
      for (int o = 0; o < c; ++o)
        if (o != k) fp += cm.at(o, k), fn += cm.at(k, o);
      const std::uint64_t tp = cm.at(k, k);
      if (tp != ref.inter[k] || tp + fp + fn != ref.uni[k]) ++bad;
      if (ref.uni[k] == 0) continue;
      const double iou = static_cast<double>(ref.inter[k]) / static_cast<double>(ref.uni[k]);
      if (r.per_class_iou[k] != iou) ++bad;
      sum += iou;
      ++valid;
    }
    if (valid > 0 && (!r.miou || *r.miou != sum / valid)) ++bad;
  }
  return {bad == 0, fmt::format("500 mask pairs, {} mismatches", bad)};
}

// Empirical runs ------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  Benchmark data;
  RunRecord atp;          // warmup, align, teach, propagate
  double atp_seconds = 0.0;
  std::size_t source_reads_after_warmup = 0;
  std::size_t source_reads_at_end = 0;
  double teach_without_npl = 0.0;
  RunRecord blackbox;
  std::map<double, double> lambda_final;
  fs::path dir;
};

ATPConfig seed_config(std::uint64_t seed) {
  ATPConfig cfg;
  cfg.seed = seed;
  return cfg;
}

SeedRun run_seed(std::uint64_t seed, const fs::path& root) {
  SeedRun s;
  s.seed = seed;
  s.dir = root / fmt::format("seed{}", seed);
  fs::create_directories(s.dir);
  s.data = generate_benchmark(SceneSpec::benchmark_default(), {}, seed);
  const ATPConfig cfg = seed_config(seed);
  const Dataset& target = s.data.target_train;
  const Dataset* eval = &s.data.target_eval;

  // Full white-box chain. Warmup runs here so the source counter can be read
  // at the moment it returns.
  const auto t0 = Clock::now();
  RunRecord warm;
  const SegmentationModel ms = warmup_source(s.data.source_train, cfg, {eval, s.dir / "atp", &warm});
  s.source_reads_after_warmup = s.data.source_train.reads();
  RunResult full = resume_atp(ms, "align", target, cfg, {eval, s.dir / "atp", nullptr});
  s.atp_seconds = since(t0);
  s.atp = full.record;
  s.atp.stages.insert(s.atp.stages.begin(), warm.stages.begin(), warm.stages.end());
  s.atp.losses.insert(s.atp.losses.begin(), warm.losses.begin(), warm.losses.end());
  s.lambda_final[cfg.teach.lambda_neg] = *s.atp.final_miou();

  const SegmentationModel aligned = load_checkpoint(s.dir / "atp" / "align.ckpt").model;

  // Teach without the negative term, from the same aligned model.
  ATPConfig no_npl = cfg;
  no_npl.teach.use_npl = false;
  const SegmentationModel t = stage_teach(aligned, target, no_npl);
  s.teach_without_npl = evaluate_model(t, *eval).miou_or_zero();

  // Black-box mode fed by the exported source-model predictions.
  export_predictions(ms, target, s.dir / "source_preds.bin");
  const auto preds = load_probability_maps(s.dir / "source_preds.bin");
  s.blackbox = run_blackbox(preds, target, cfg, {eval, s.dir / "blackbox", nullptr}).record;

  // lambda_neg sweep over teach + propagate.
  for (double lambda : kLambdaSweep) {
    if (s.lambda_final.count(lambda)) continue;
    ATPConfig c = cfg;
    c.teach.lambda_neg = lambda;
    RunResult r = resume_atp(aligned, "teach", target, c, {eval, "", nullptr});
    s.lambda_final[lambda] = *r.record.final_miou();
  }
  s.source_reads_at_end = s.data.source_train.reads();
  std::printf("  seed %llu: stages [%s] no-npl teach %.4f blackbox [%s] (%.0fs chain)\n",
              static_cast<unsigned long long>(seed), [&] {
                std::vector<double> v;
                for (const auto& st : s.atp.stages) v.push_back(st.miou.value_or(0));
                return join(v);
              }().c_str(),
              s.teach_without_npl, [&] {
                std::vector<double> v;
                for (const auto& st : s.blackbox.stages) v.push_back(st.miou.value_or(0));
                return join(v);
              }().c_str(),
              s.atp_seconds);
  std::fflush(stdout);
  return s;
}

double stage(const RunRecord& r, const std::string& name) { return r.stage_miou(name).value_or(0.0); }

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const fs::path root = fs::current_path() / "acceptance_runs";
  fs::remove_all(root);
  fs::create_directories(root);

  report(1, "loss gradients vs finite diff", loss_gradients());
  report(2, "worked negative-label example", worked_negative_example());
  report(3, "class-balanced labeler oracle", labeler_oracle());
  report(4, "split invariants", split_invariants());
  report(5, "mIoU oracle equivalence", miou_oracle());

  std::vector<SeedRun> runs;
  for (auto seed : kSeeds) runs.push_back(run_seed(seed, root));

  // 6
  {
    std::vector<double> gains;
    double slowest = 0.0;
    for (const auto& r : runs) {
      gains.push_back(*r.atp.final_miou() - stage(r.atp, "warmup"));
      slowest = std::max(slowest, r.atp_seconds);
    }
    const double g = median(gains);
    report(6, "adaptation efficacy",
           {g >= kMinAdaptGain && slowest < kPipelineBudgetSec,
            fmt::format("median gain {:.4f} (gains {}), slowest chain {:.0f}s", g, join(gains), slowest)});
  }
  // 7
  {
    const char* chain[] = {"warmup", "align", "teach", "propagate"};
    std::vector<double> med;
    for (const char* st : chain) {
      std::vector<double> v;
      for (const auto& r : runs) v.push_back(stage(r.atp, st));
      med.push_back(median(v));
    }
    bool ordered = true;
    for (std::size_t i = 1; i < med.size(); ++i) ordered = ordered && med[i] >= med[i - 1] - kStepTolerance;
    const double gain = med.back() - med.front();
    report(7, "ablation ordering",
           {ordered && gain >= kMinAdaptGain,
            fmt::format("median source/align/teach/full {} (gain {:.4f})", join(med), gain)});
  }
  // 8: both clauses on the medians over seeds.
  {
    std::vector<double> with, without;
    for (const auto& r : runs) {
      with.push_back(stage(r.atp, "teach"));
      without.push_back(r.teach_without_npl);
    }
    const double mw = median(with), mo = median(without);
    report(8, "negative-label contribution",
           {mw >= mo - kNplTolerance && mw > mo, fmt::format("teach with npl {} / without {} (medians {:.4f} vs {:.4f})",
                                                             join(with), join(without), mw, mo)});
  }
  // 9
  {
    std::vector<double> gains;
    for (const auto& r : runs) gains.push_back(*r.blackbox.final_miou() - stage(r.blackbox, "distill"));
    const double g = median(gains);
    report(9, "black-box over KD-only", {g >= kMinBlackBoxGain, fmt::format("median gain {:.4f} (gains {})", g, join(gains))});
  }
  // 10
  {
    std::map<double, double> med;
    for (double l : kLambdaSweep) {
      std::vector<double> v;
      for (const auto& r : runs) v.push_back(r.lambda_final.at(l));
      med[l] = median(v);
    }
    bool ok = true;
    std::string detail;
    for (double l : kLambdaSweep) {
      if (l <= 0.1) ok = ok && med[l] >= med[0.2];
      detail += fmt::format("{}={:.4f} ", l, med[l]);
    }
    // Sweep records feed the sensitivity plot.
    std::vector<RunRecord> sweep;
    for (double l : kLambdaSweep) {
      RunRecord rec;
      rec.run_id = fmt::format("lambda_neg-{}", l);
      rec.sweep = {{"lambda_neg", l}};
      rec.stages.push_back({"propagate", med[l], {}, {}, 0.0});
      sweep.push_back(rec);
    }
    emit_report(sweep, root / "lambda_sweep");
    report(10, "lambda_neg sensitivity", {ok, "median final mIoU " + detail});
  }
  // 11
  {
    const SeedRun& first = runs.front();
    const Benchmark again = generate_benchmark(SceneSpec::benchmark_default(), {}, first.seed);
    const fs::path dir = root / "rerun";
    const RunResult r = run_atp(again.source_train, again.target_train, seed_config(first.seed), {&again.target_eval, dir, nullptr});
    const double d = std::abs(*r.record.final_miou() - *first.atp.final_miou());
    const bool same_manifest = slurp(dir / "split_manifest.csv") == slurp(first.dir / "atp" / "split_manifest.csv") &&
                               !slurp(dir / "split_manifest.csv").empty();
    report(11, "determinism",
           {d <= kDeterminismTol && same_manifest,
            fmt::format("final mIoU diff {:.2e}, manifests {}", d, same_manifest ? "identical" : "differ")});

    // 12: the rerun counts every source read made by run_atp; the standalone
    // warmup of the first run must account for all of them.
    const std::size_t rerun_reads = again.source_train.reads();
    bool ok = rerun_reads == first.source_reads_after_warmup;
    std::size_t after = 0;
    for (const auto& s : runs) {
      after += s.source_reads_at_end - s.source_reads_after_warmup;
      ok = ok && s.source_reads_at_end == s.source_reads_after_warmup;
    }
    report(12, "source-data firewall",
           {ok && after == 0, fmt::format("{} source reads after warmup across all post-warmup stages; run_atp total {} = "
                                          "warmup-only {}",
                                          after, rerun_reads, first.source_reads_after_warmup)});
  }

  int failed = 0;
  for (const auto& [id, o] : results) failed += !o.pass;
  std::printf("%d of %zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
