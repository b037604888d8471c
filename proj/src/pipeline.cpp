// SPDX-License-Identifier: Apache-2.0
#include "atp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include <spdlog/spdlog.h>

#include "atp/error.hpp"
#include "atp/evaluation.hpp"
#include "atp/parallel.hpp"
#include "rng.hpp"

namespace atp {

namespace {

// Substream tags so every stage draws from its own generator.
enum StageTag : std::uint64_t { kInit = 1, kWarmup, kAlign, kTeach, kPropagate, kDistill, kDistillInit };

std::uint64_t stage_seed(const ATPConfig& cfg, StageTag tag) { return rng::mix(cfg.seed, tag); }

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Shuffled mini-batches of ids for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> ids, std::size_t batch_size,
                                                    std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(ids.begin(), ids.end());
  std::mt19937_64 rng(rng::mix(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return batches;
}

std::vector<std::size_t> all_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

std::int64_t batches_per_epoch(std::size_t n, std::size_t batch_size) {
  return static_cast<std::int64_t>((n + batch_size - 1) / batch_size);
}

/// Accumulates named per-batch losses into epoch means.
class EpochMeter {
 public:
  void add(const std::string& name, double v) {
    for (auto& [k, s] : sums_)
      if (k == name) {
        s += v;
        counts_[name_index(name)] += 1;
        return;
      }
    sums_.emplace_back(name, v);
    counts_.push_back(1);
  }

  EpochLoss finish(const std::string& stage, int epoch) const {
    EpochLoss e{stage, epoch, {}};
    for (std::size_t i = 0; i < sums_.size(); ++i) e.terms.emplace_back(sums_[i].first, sums_[i].second / counts_[i]);
    return e;
  }

  double mean(const std::string& name) const {
    const std::size_t i = name_index(name);
    return i < sums_.size() ? sums_[i].second / counts_[i] : 0.0;
  }

 private:
  std::size_t name_index(const std::string& name) const {
    for (std::size_t i = 0; i < sums_.size(); ++i)
      if (sums_[i].first == name) return i;
    return sums_.size();
  }

  std::vector<std::pair<std::string, double>> sums_;
  std::vector<double> counts_;
};

void log_epoch(const EpochLoss& e) {
  std::string terms;
  for (const auto& [k, v] : e.terms) terms += fmt::format(" {}={:.5f}", k, v);
  spdlog::info("[{}] epoch {}{}", e.stage, e.epoch, terms);
}

void finish_stage(const std::string& stage, const SegmentationModel& m, const SgdState& state, StageContext& ctx,
                  Clock::time_point t0) {
  StageResult r;
  r.stage = stage;
  if (!ctx.out_dir.empty()) {
    std::filesystem::create_directories(ctx.out_dir);
    r.checkpoint = ctx.out_dir / (stage + ".ckpt");
    save_checkpoint(r.checkpoint, m, state);
  }
  if (ctx.target_eval) {
    const IoUReport rep = evaluate_model(m, *ctx.target_eval);
    r.miou = rep.miou_or_zero();
    r.per_class_iou = rep.per_class_iou;
    spdlog::info("[{}] target-eval mIoU {:.4f}", stage, *r.miou);
  }
  r.seconds = seconds_since(t0);
  if (ctx.record) ctx.record->stages.push_back(std::move(r));
}

void record_epoch(StageContext& ctx, EpochLoss e) {
  log_epoch(e);
  if (ctx.record) ctx.record->losses.push_back(std::move(e));
}

std::vector<AugmentationOp> photometric_ops(double brightness, double contrast, double saturation, double sigma) {
  std::vector<AugmentationOp> ops;
  if (brightness > 0.0 || contrast > 0.0 || saturation > 0.0)
    ops.push_back(AugmentationOp::color_jitter(brightness, contrast, saturation));
  if (sigma > 0.0) ops.push_back(AugmentationOp::gaussian_blur(sigma));
  return ops;
}

}  // namespace

std::optional<double> RunRecord::final_miou() const {
  for (auto it = stages.rbegin(); it != stages.rend(); ++it)
    if (it->miou) return it->miou;
  return std::nullopt;
}

std::optional<double> RunRecord::stage_miou(const std::string& stage) const {
  for (const auto& s : stages)
    if (s.stage == stage) return s.miou;
  return std::nullopt;
}

std::vector<ProbabilityMap> predict_all(const SegmentationModel& m, const Dataset& data) {
  std::vector<ProbabilityMap> maps(data.size());
  parallel_for(data.size(), [&](std::size_t i) { maps[i] = m.forward(data.image(i)); });
  return maps;
}

void export_predictions(const SegmentationModel& m, const Dataset& data, const std::filesystem::path& path) {
  save_probability_maps(predict_all(m, data), path);
}

SegmentationModel warmup_source(const Dataset& source, const ATPConfig& cfg, StageContext ctx) {
  const auto t0 = Clock::now();
  if (source.size() == 0) throw InvalidInput("warmup needs a non-empty source dataset");
  if (source.num_classes() != cfg.model.num_classes)
    throw InvalidInput("source dataset has " + std::to_string(source.num_classes()) + " classes, config expects " +
                       std::to_string(cfg.model.num_classes));
  SegmentationModel m = build_model(cfg.model, stage_seed(cfg, kInit));
  const auto& opt = cfg.warmup.optim;
  const auto ids = all_ids(source.size());
  const TrainSchedule sched =
      stage_schedule(cfg, opt, cfg.warmup.max_epochs * batches_per_epoch(source.size(), opt.batch_size));
  SgdState state;
  const std::uint64_t seed = stage_seed(cfg, kWarmup);
  for (int epoch = 0; epoch < cfg.warmup.max_epochs; ++epoch) {
    EpochMeter meter;
    for (const auto& batch : epoch_batches(ids, opt.batch_size, seed, epoch)) {
      const double loss = train_batch(m, state, sched, batch, [&](std::size_t i, SampleTape& tape) {
        const ProbabilityMap p = tape.forward(source.image(i));
        std::vector<double> grad(p.values().size(), 0.0);
        const LossValue ce = cross_entropy_loss(p, source.label(i), grad);
        tape.backward(grad);
        return ce.value;
      });
      meter.add("ce", loss);
    }
    EpochLoss e = meter.finish("warmup", epoch);
    record_epoch(ctx, e);
    if (meter.mean("ce") < cfg.warmup.target_loss) break;
  }
  finish_stage("warmup", m, state, ctx, t0);
  return m;
}

SegmentationModel stage_align(SegmentationModel m, const Dataset& target, const ATPConfig& cfg, StageContext ctx) {
  const auto t0 = Clock::now();
  const auto& a = cfg.align;
  freeze_classifier(m, true);
  const auto ids = all_ids(target.size());
  const TrainSchedule sched =
      stage_schedule(cfg, a.optim, a.epochs * batches_per_epoch(target.size(), a.optim.batch_size));
  SgdState state;
  const std::uint64_t seed = stage_seed(cfg, kAlign);
  for (int epoch = 0; epoch < a.epochs; ++epoch) {
    EpochMeter meter;
    for (const auto& batch : epoch_batches(ids, a.optim.batch_size, seed, epoch)) {
      std::vector<const Image*> images;
      for (auto i : batch) images.push_back(&target.image(i));
      double cel = 0.0, div = 0.0;
      // The diversity marginal spans the whole batch, so the batch is scored
      // as one tall probability map.
      const BatchTerm term = [&](std::span<const ProbabilityMap> probs, std::span<std::vector<double>> grads) {
        const ProbabilityMap& first = probs.front();
        std::vector<double> joined;
        joined.reserve(first.values().size() * probs.size());
        for (const auto& p : probs) joined.insert(joined.end(), p.values().begin(), p.values().end());
        const ProbabilityMap tall(first.height() * static_cast<int>(probs.size()), first.width(),
                                  first.num_classes(), std::move(joined));
        std::vector<double> g(tall.values().size(), 0.0);
        cel = curriculum_entropy_loss(tall, a.alpha, a.gamma, g).value;
        div = a.div_weight != 0.0 ? weighted_diversity_loss(tall, a.lambda_div, g, a.div_weight).value : 0.0;
        const std::size_t stride = first.values().size();
        for (std::size_t k = 0; k < grads.size(); ++k)
          std::copy(g.begin() + static_cast<std::ptrdiff_t>(k * stride),
                    g.begin() + static_cast<std::ptrdiff_t>((k + 1) * stride), grads[k].begin());
        return cel + a.div_weight * div;
      };
      const double total = train_batch_joint(m, state, sched, images, term);
      meter.add("cel", cel);
      meter.add("div", div);
      meter.add("total", total);
    }
    record_epoch(ctx, meter.finish("align", epoch));
  }
  freeze_classifier(m, false);
  finish_stage("align", m, state, ctx, t0);
  return m;
}

SegmentationModel stage_teach(SegmentationModel m, const Dataset& target, const ATPConfig& cfg, StageContext ctx) {
  const auto t0 = Clock::now();
  const auto& t = cfg.teach;
  freeze_classifier(m, false);
  const auto ids = all_ids(target.size());
  const TrainSchedule sched = stage_schedule(
      cfg, t.optim, static_cast<std::int64_t>(t.stages) * t.epochs_per_stage *
                        batches_per_epoch(target.size(), t.optim.batch_size));
  SgdState state;
  const std::uint64_t seed = stage_seed(cfg, kTeach);
  int epoch_counter = 0;
  for (int s = 0; s < t.stages; ++s) {
    const std::vector<ProbabilityMap> maps = predict_all(m, target);
    const ClassThresholds thresholds = compute_class_thresholds(maps, t.K);
    std::vector<HardLabelMask> labels(maps.size());
    LabelingStats stats;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      labels[i] = assign_positive_labels(maps[i], thresholds);
      stats += labeling_stats(labels[i], assign_negative_labels(maps[i], t.lambda_neg));
    }
    const std::size_t flags = std::accumulate(stats.negative_flags.begin(), stats.negative_flags.end(), std::size_t{0});
    if (stats.ignore_fraction >= 1.0 && (flags == 0 || !t.use_npl))
      throw TrainingError("teach stage " + std::to_string(s) +
                          ": every pixel is IGNORE and no negative labels exist (degenerate labeler)");
    spdlog::info("[teach] stage {} ignore fraction {:.4f}, negative flags {}", s, stats.ignore_fraction, flags);
    if (ctx.record) ctx.record->teach_stats.push_back(stats);

    for (int e = 0; e < t.epochs_per_stage; ++e, ++epoch_counter) {
      EpochMeter meter;
      for (const auto& batch : epoch_batches(ids, t.optim.batch_size, seed, epoch_counter)) {
        std::vector<double> ce_terms(batch.size(), 0.0), npl_terms(batch.size(), 0.0);
        const double loss = train_batch(m, state, sched, batch, [&](std::size_t i, SampleTape& tape) {
          const ProbabilityMap p = tape.forward(target.image(i));
          std::vector<double> grad(p.values().size(), 0.0);
          const LossValue ce = cross_entropy_loss(p, labels[i], grad);
          LossValue npl;
          if (t.use_npl) npl = negative_pseudo_loss(p, assign_negative_labels(p, t.lambda_neg), grad);
          tape.backward(grad);
          const auto k = static_cast<std::size_t>(std::find(batch.begin(), batch.end(), i) - batch.begin());
          ce_terms[k] = ce.value;
          npl_terms[k] = npl.value;
          return bidirectional_loss(ce, npl).value;
        });
        meter.add("ce", std::accumulate(ce_terms.begin(), ce_terms.end(), 0.0) / static_cast<double>(batch.size()));
        meter.add("npl", std::accumulate(npl_terms.begin(), npl_terms.end(), 0.0) / static_cast<double>(batch.size()));
        meter.add("total", loss);
      }
      record_epoch(ctx, meter.finish("teach", epoch_counter));
    }
  }
  finish_stage("teach", m, state, ctx, t0);
  return m;
}

SegmentationModel stage_propagate(SegmentationModel m, const Dataset& target, const ATPConfig& cfg, StageContext ctx,
                                  SplitAssignment* split_out) {
  const auto t0 = Clock::now();
  const auto& pc = cfg.propagate;
  freeze_classifier(m, false);
  SgdState state;
  if (pc.epochs == 0) {
    finish_stage("propagate", m, state, ctx, t0);
    return m;
  }
  // The teacher is the model entering this stage, so its predictions on the
  // clean target images double as the ranking maps.
  const std::vector<ProbabilityMap> teacher_maps = predict_all(m, target);
  std::vector<double> scores(teacher_maps.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = rank_image(teacher_maps[i]);
  const SplitAssignment split = split_dataset(scores, pc.ratio);
  if (!ctx.out_dir.empty()) {
    std::filesystem::create_directories(ctx.out_dir);
    write_split_manifest(split, ctx.out_dir / "split_manifest.csv");
  }
  if (split_out) *split_out = split;

  std::vector<HardLabelMask> easy_labels(target.size());
  if (!split.easy_ids.empty()) {
    std::vector<const ProbabilityMap*> easy_maps;
    for (auto id : split.easy_ids) easy_maps.push_back(&teacher_maps[id]);
    const ClassThresholds thresholds = compute_class_thresholds(std::span<const ProbabilityMap* const>(easy_maps), cfg.teach.K);
    for (auto id : split.easy_ids) easy_labels[id] = assign_positive_labels(teacher_maps[id], thresholds);
  } else {
    spdlog::warn("[propagate] easy split is empty; the supervised term is zero");
  }

  PropagationOptions options;
  options.cyc_weight = pc.cyc_weight;
  options.photometric = photometric_ops(pc.jitter_brightness, pc.jitter_contrast, pc.jitter_saturation, pc.blur_sigma);

  const bool hard_empty = split.hard_ids.empty();
  const std::vector<std::size_t>& pool = hard_empty ? split.easy_ids : split.hard_ids;
  const TrainSchedule sched =
      stage_schedule(cfg, pc.optim, pc.epochs * batches_per_epoch(pool.size(), pc.optim.batch_size));
  const std::uint64_t seed = stage_seed(cfg, kPropagate);
  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    EpochMeter meter;
    for (const auto& batch : epoch_batches(pool, pc.optim.batch_size, seed, epoch)) {
      std::vector<PropagationLoss> parts(batch.size());
      const double loss = train_batch(m, state, sched, batch, [&](std::size_t id, SampleTape& tape) {
        const std::uint64_t key = rng::mix(seed, static_cast<std::uint64_t>(epoch) << 32 | id);
        const auto k = static_cast<std::size_t>(std::find(batch.begin(), batch.end(), id) - batch.begin());
        if (hard_empty) {
          const ProbabilityMap p = tape.forward(target.image(id));
          std::vector<double> grad(p.values().size(), 0.0);
          parts[k].supervised = cross_entropy_loss(p, easy_labels[id], grad);
          tape.backward(grad);
          parts[k].total = parts[k].supervised.value;
          return parts[k].total;
        }
        EasySample easy;
        if (!split.easy_ids.empty()) {
          const std::size_t partner = split.easy_ids[rng::splitmix(key) % split.easy_ids.size()];
          easy = {&target.image(partner), &easy_labels[partner]};
        }
        parts[k] = propagation_objective(tape, teacher_maps[id], easy, target.image(id), options, key);
        return parts[k].total;
      });
      double ce = 0.0, cyc = 0.0;
      for (const auto& p : parts) {
        ce += p.supervised.value;
        cyc += p.consistency.value;
      }
      meter.add("ce", ce / static_cast<double>(parts.size()));
      meter.add("cyc", cyc / static_cast<double>(parts.size()));
      meter.add("total", loss);
    }
    record_epoch(ctx, meter.finish("propagate", epoch));
  }
  finish_stage("propagate", m, state, ctx, t0);
  return m;
}

SegmentationModel stage_distill(std::span<const ProbabilityMap> source_preds, const Dataset& target,
                                const ATPConfig& cfg, StageContext ctx) {
  const auto t0 = Clock::now();
  if (source_preds.size() != target.size()) {
    const std::size_t missing = std::min(source_preds.size(), target.size());
    throw FormatError("stored predictions cover " + std::to_string(source_preds.size()) + " of " +
                      std::to_string(target.size()) + " target images; first missing image id " +
                      std::to_string(missing));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const Image& img = target.image(i);
    const ProbabilityMap& p = source_preds[i];
    if (p.height() != img.height || p.width() != img.width || p.num_classes() != cfg.model.num_classes)
      throw FormatError("stored prediction for target image " + std::to_string(i) + " has shape " +
                        std::to_string(p.height()) + "x" + std::to_string(p.width()) + "x" +
                        std::to_string(p.num_classes()));
  }
  const auto& b = cfg.blackbox;
  SegmentationModel m = build_model(cfg.model, stage_seed(cfg, kDistillInit));
  const auto ids = all_ids(target.size());
  const TrainSchedule sched =
      stage_schedule(cfg, b.optim, b.kd_epochs * batches_per_epoch(target.size(), b.optim.batch_size));
  SgdState state;
  const std::uint64_t seed = stage_seed(cfg, kDistill);
  const auto ops = b.augment ? photometric_ops(b.jitter_strength, b.jitter_strength, b.jitter_strength, b.blur_sigma)
                             : std::vector<AugmentationOp>{};
  for (int epoch = 0; epoch < b.kd_epochs; ++epoch) {
    EpochMeter meter;
    for (const auto& batch : epoch_batches(ids, b.optim.batch_size, seed, epoch)) {
      const double loss = train_batch(m, state, sched, batch, [&](std::size_t i, SampleTape& tape) {
        Image x = target.image(i);
        const std::uint64_t key = rng::mix(seed, static_cast<std::uint64_t>(epoch) << 32 | i);
        for (std::size_t k = 0; k < ops.size(); ++k) x = photometric_augment(x, ops[k], rng::mix(key, k));
        const ProbabilityMap p = tape.forward(x);
        std::vector<double> grad(p.values().size(), 0.0);
        const LossValue kd = kd_loss(source_preds[i], p, grad);
        tape.backward(grad);
        return kd.value;
      });
      meter.add("kd", loss);
      if (epoch == 0 && ctx.record) ctx.record->distill_first_epoch.push_back(loss);
    }
    record_epoch(ctx, meter.finish("distill", epoch));
  }
  finish_stage("distill", m, state, ctx, t0);
  return m;
}

namespace {

std::string config_echo(const ATPConfig& cfg) {
  return cfg.source_text.empty() ? config_to_json(cfg) : cfg.source_text;
}

RunRecord& attach_record(RunResult& result, StageContext& ctx, const ATPConfig& cfg, const std::string& kind) {
  result.record.run_id = fmt::format("{}-seed{}", kind, cfg.seed);
  result.record.config_echo = config_echo(cfg);
  ctx.record = &result.record;
  return result.record;
}

}  // namespace

RunResult resume_atp(SegmentationModel from, const std::string& start, const Dataset& target, const ATPConfig& cfg,
                     StageContext ctx) {
  static const std::vector<std::string> order = {"align", "teach", "propagate"};
  const auto it = std::find(order.begin(), order.end(), start);
  if (it == order.end()) throw InvalidInput("unknown stage '" + start + "' (expected align, teach or propagate)");
  const auto t0 = Clock::now();
  RunResult result{std::move(from), {}};
  attach_record(result, ctx, cfg, "atp");
  const auto first = it - order.begin();
  if (first <= 0) result.model = stage_align(std::move(result.model), target, cfg, ctx);
  if (first <= 1) result.model = stage_teach(std::move(result.model), target, cfg, ctx);
  result.model = stage_propagate(std::move(result.model), target, cfg, ctx);
  result.record.wall_seconds = seconds_since(t0);
  return result;
}

RunResult run_atp(const Dataset& source, const Dataset& target, const ATPConfig& cfg, StageContext ctx) {
  if (cfg.mode != RunMode::kWhiteBox) throw InvalidInput("run_atp requires mode white_box");
  const auto t0 = Clock::now();
  RunRecord warm;
  StageContext warm_ctx = ctx;
  warm_ctx.record = &warm;
  SegmentationModel ms = warmup_source(source, cfg, warm_ctx);
  // Source data is out of reach from here on: the remaining stages only see
  // the model and the target set.
  RunResult result = resume_atp(std::move(ms), "align", target, cfg, ctx);
  RunRecord& rec = result.record;
  rec.losses.insert(rec.losses.begin(), warm.losses.begin(), warm.losses.end());
  rec.stages.insert(rec.stages.begin(), warm.stages.begin(), warm.stages.end());
  rec.wall_seconds = seconds_since(t0);
  return result;
}

RunResult run_blackbox(std::span<const ProbabilityMap> source_preds, const Dataset& target, const ATPConfig& cfg,
                       StageContext ctx) {
  const auto t0 = Clock::now();
  RunResult result{build_model(cfg.model, stage_seed(cfg, kDistillInit)), {}};
  attach_record(result, ctx, cfg, "blackbox");
  result.model = stage_distill(source_preds, target, cfg, ctx);
  result.model = stage_teach(std::move(result.model), target, cfg, ctx);
  result.model = stage_propagate(std::move(result.model), target, cfg, ctx);
  result.record.wall_seconds = seconds_since(t0);
  return result;
}

}  // namespace atp
