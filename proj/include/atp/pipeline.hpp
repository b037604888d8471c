// SPDX-License-Identifier: Apache-2.0
//
// Stage orchestration: source warmup, Align, Teach, Propagate and the
// black-box variant, plus the JSON configuration they share.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atp/model.hpp"
#include "atp/propagation.hpp"
#include "atp/pseudo_labeling.hpp"
#include "atp/synthetic_data.hpp"

namespace atp {

enum class RunMode { kWhiteBox, kBlackBox };

/// Optimizer settings for one stage. `max_iter` of the poly schedule is
/// derived from epochs and batch count when the stage starts.
struct StageOptim {
  double lr = 1e-2;
  double classifier_lr = 1e-2;
  std::size_t batch_size = 8;
};

struct WarmupConfig {
  StageOptim optim{5e-2, 5e-2, 8};
  int max_epochs = 40;
  double target_loss = 0.1;  // stop once an epoch's mean cross-entropy drops below
};

struct AlignConfig {
  StageOptim optim{5e-4, 0.0, 8};
  double alpha = 0.002;
  double gamma = 3.0;
  double lambda_div = 3.0;
  double div_weight = 1.0;
  int epochs = 2;
};

struct TeachConfig {
  StageOptim optim{2e-2, 2e-2, 8};
  double K = 0.65;
  double lambda_neg = 0.05;
  int stages = 3;
  int epochs_per_stage = 10;
  bool use_npl = true;
};

struct PropagateConfig {
  StageOptim optim{1e-2, 1e-2, 8};
  double ratio = 0.5;
  double cyc_weight = 1.0;
  int epochs = 10;
  double jitter_brightness = 0.2;
  double jitter_contrast = 0.2;
  double jitter_saturation = 0.2;
  double blur_sigma = 0.5;
};

struct BlackBoxConfig {
  StageOptim optim{5e-2, 5e-2, 8};
  int kd_epochs = 10;
  bool augment = false;  // color jitter + Gaussian blur on the student input during KD
  double jitter_strength = 0.2;
  double blur_sigma = 0.5;
};

struct ATPConfig {
  RunMode mode = RunMode::kWhiteBox;
  std::uint64_t seed = 0;
  ModelShape model;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  WarmupConfig warmup;
  AlignConfig align;
  TeachConfig teach;
  PropagateConfig propagate;
  BlackBoxConfig blackbox;

  /// Exact text the config was parsed from (empty when built in code).
  std::string source_text;
};

/// Parses a JSON config; every key is optional, unknown keys throw InvalidInput.
ATPConfig config_from_json(const std::string& text);
std::string config_to_json(const ATPConfig& cfg);
ATPConfig load_config(const std::filesystem::path& path);

TrainSchedule stage_schedule(const ATPConfig& cfg, const StageOptim& optim, std::int64_t max_iter);

struct EpochLoss {
  std::string stage;
  int epoch = 0;
  std::vector<std::pair<std::string, double>> terms;  // term name -> epoch mean
};

struct StageResult {
  std::string stage;
  std::optional<double> miou;  // on held-out target eval, when provided
  std::vector<double> per_class_iou;
  std::filesystem::path checkpoint;
  double seconds = 0.0;
};

struct RunRecord {
  std::string run_id;
  std::string config_echo;
  std::vector<std::pair<std::string, double>> sweep;  // swept parameter values, if any
  std::vector<EpochLoss> losses;
  std::vector<StageResult> stages;
  std::vector<LabelingStats> teach_stats;  // one per teach stage
  std::vector<double> distill_first_epoch;  // per-iteration KD loss, first epoch
  double wall_seconds = 0.0;

  std::optional<double> final_miou() const;
  std::optional<double> stage_miou(const std::string& stage) const;
};

/// Optional side channel for a stage: evaluation data, checkpoint directory
/// and the record that collects losses and results.
struct StageContext {
  const Dataset* target_eval = nullptr;
  std::filesystem::path out_dir;  // empty = no checkpoints or manifests
  RunRecord* record = nullptr;
};

/// Trains M_s on labeled source data with cross-entropy.
SegmentationModel warmup_source(const Dataset& source, const ATPConfig& cfg, StageContext ctx = {});

/// Curriculum entropy + weighted diversity with the classifier frozen.
SegmentationModel stage_align(SegmentationModel m, const Dataset& target, const ATPConfig& cfg,
                              StageContext ctx = {});

/// Bidirectional self-training over cfg.teach.stages label refreshes.
SegmentationModel stage_teach(SegmentationModel m, const Dataset& target, const ATPConfig& cfg,
                              StageContext ctx = {});

/// Entropy split plus supervised/consistency training; the split used is
/// copied to split_out when given.
SegmentationModel stage_propagate(SegmentationModel m, const Dataset& target, const ATPConfig& cfg,
                                  StageContext ctx = {}, SplitAssignment* split_out = nullptr);

/// KD warm-start of a fresh model against stored source predictions.
SegmentationModel stage_distill(std::span<const ProbabilityMap> source_preds, const Dataset& target,
                                const ATPConfig& cfg, StageContext ctx = {});

struct RunResult {
  SegmentationModel model;
  RunRecord record;
};

/// warmup -> align -> teach -> propagate with a checkpoint after each stage.
RunResult run_atp(const Dataset& source, const Dataset& target, const ATPConfig& cfg, StageContext ctx = {});

/// Runs the white-box stages from `start` ("align", "teach" or "propagate")
/// onward, beginning with a stored model.
RunResult resume_atp(SegmentationModel from, const std::string& start, const Dataset& target, const ATPConfig& cfg,
                     StageContext ctx = {});

/// KD warm-start, then teach and propagate. Throws FormatError when the
/// predictions do not cover the target set.
RunResult run_blackbox(std::span<const ProbabilityMap> source_preds, const Dataset& target, const ATPConfig& cfg,
                       StageContext ctx = {});

/// One probability map per dataset image, in dataset order.
std::vector<ProbabilityMap> predict_all(const SegmentationModel& m, const Dataset& data);
void export_predictions(const SegmentationModel& m, const Dataset& data, const std::filesystem::path& path);

}  // namespace atp
