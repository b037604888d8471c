// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "atp/error.hpp"
#include "atp/evaluation.hpp"
#include "atp/pipeline.hpp"
#include "atp/synthetic_data.hpp"

namespace fs = std::filesystem;

namespace {

struct StageArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
};

void add_stage_options(CLI::App* cmd, StageArgs& a) {
  cmd->add_option("--config", a.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--data", a.data, "Benchmark directory written by gen-data")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--out", a.out, "Output directory for checkpoints and reports")->required();
  cmd->add_option("--resume", a.resume, "Checkpoint to start from")->check(CLI::ExistingFile);
}

atp::ATPConfig read_config(const std::string& path) {
  return path.empty() ? atp::ATPConfig{} : atp::load_config(path);
}

/// A benchmark directory holds four dataset directories; a dataset directory
/// holds meta.json. Returns the requested split either way.
atp::Dataset open_dataset(const fs::path& dir, const char* split) {
  if (fs::exists(dir / "meta.json")) return atp::load_dataset(dir);
  return atp::load_dataset(dir / split);
}

atp::SegmentationModel open_model(const std::string& path, const atp::ATPConfig& cfg) {
  return atp::load_checkpoint(path, &cfg.model).model;
}

void finish_run(const atp::RunRecord& record, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream(out / "config_echo.json", std::ios::binary) << record.config_echo;
  atp::emit_report(std::span<const atp::RunRecord>(&record, 1), out / "report");
  if (const auto m = record.final_miou()) std::printf("final target-eval mIoU %.4f\n", *m);
}

/// warmup.ckpt resumes at align, align.ckpt at teach, teach.ckpt at propagate.
std::string next_stage(const fs::path& ckpt) {
  const std::string stem = ckpt.stem().string();
  if (stem == "warmup") return "align";
  if (stem == "align") return "teach";
  if (stem == "teach") return "propagate";
  throw atp::InvalidInput("cannot tell which stage follows checkpoint " + ckpt.string() +
                          " (expected warmup.ckpt, align.ckpt or teach.ckpt)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free domain adaptation toolkit for semantic segmentation"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  std::string spec_path, gen_out;
  std::uint64_t gen_seed = 0;
  atp::BenchmarkSizes sizes;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic source/target benchmark");
  gen->add_option("--spec", spec_path, "Scene spec JSON (default benchmark when omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--source-train", sizes.source_train);
  gen->add_option("--source-eval", sizes.source_eval);
  gen->add_option("--target-train", sizes.target_train);
  gen->add_option("--target-eval", sizes.target_eval);

  StageArgs train_args, align_args, teach_args, prop_args, run_args, bb_args;
  add_stage_options(app.add_subcommand("train-source", "Warm up the source model"), train_args);
  add_stage_options(app.add_subcommand("align", "Implicit feature alignment (needs --resume)"), align_args);
  add_stage_options(app.add_subcommand("teach", "Bidirectional self-training (needs --resume)"), teach_args);
  add_stage_options(app.add_subcommand("propagate", "Information propagation (needs --resume)"), prop_args);
  add_stage_options(app.add_subcommand("run", "All white-box stages"), run_args);
  auto* bb = app.add_subcommand("run-blackbox", "Black-box variant from stored source predictions");
  add_stage_options(bb, bb_args);
  std::string bb_preds;
  bb->add_option("--preds", bb_preds, "Prediction store written by export-preds")->required()->check(CLI::ExistingFile);

  std::string ex_ckpt, ex_data, ex_out;
  auto* ex = app.add_subcommand("export-preds", "Store a model's target-train predictions");
  ex->add_option("--ckpt", ex_ckpt)->required()->check(CLI::ExistingFile);
  ex->add_option("--data", ex_data, "Benchmark or dataset directory")->required()->check(CLI::ExistingDirectory);
  ex->add_option("--out", ex_out)->required();

  std::string ev_ckpt, ev_data, ev_report;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on target-eval data");
  ev->add_option("--ckpt", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Benchmark or dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--report", ev_report)->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (gen->parsed()) {
      atp::SceneSpec spec = atp::SceneSpec::benchmark_default();
      if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        std::stringstream text;
        text << in.rdbuf();
        spec = atp::scene_spec_from_json(text.str());
      }
      atp::save_benchmark(atp::generate_benchmark(spec, sizes, gen_seed), spec, gen_seed, gen_out);
      spdlog::info("wrote benchmark to {}", gen_out);
      return 0;
    }

    auto stage_command = [&](const StageArgs& a, const std::string& stage) {
      const atp::ATPConfig cfg = read_config(a.config);
      const atp::Dataset target = atp::load_dataset(fs::path(a.data) / "target_train");
      const atp::Dataset eval = atp::load_dataset(fs::path(a.data) / "target_eval");
      atp::RunRecord record;
      record.run_id = stage + "-seed" + std::to_string(cfg.seed);
      record.config_echo = cfg.source_text.empty() ? atp::config_to_json(cfg) : cfg.source_text;
      atp::StageContext ctx{&eval, a.out, &record};
      if (stage == "train-source") {
        const atp::Dataset source = atp::load_dataset(fs::path(a.data) / "source_train");
        atp::warmup_source(source, cfg, ctx);
      } else {
        if (a.resume.empty()) throw atp::InvalidInput(stage + " needs --resume <checkpoint>");
        atp::SegmentationModel m = open_model(a.resume, cfg);
        if (stage == "align") atp::stage_align(std::move(m), target, cfg, ctx);
        if (stage == "teach") atp::stage_teach(std::move(m), target, cfg, ctx);
        if (stage == "propagate") atp::stage_propagate(std::move(m), target, cfg, ctx);
      }
      finish_run(record, a.out);
    };

    if (app.got_subcommand("train-source")) stage_command(train_args, "train-source");
    if (app.got_subcommand("align")) stage_command(align_args, "align");
    if (app.got_subcommand("teach")) stage_command(teach_args, "teach");
    if (app.got_subcommand("propagate")) stage_command(prop_args, "propagate");

    if (app.got_subcommand("run")) {
      const atp::ATPConfig cfg = read_config(run_args.config);
      if (cfg.mode != atp::RunMode::kWhiteBox) throw atp::InvalidInput("run needs mode white_box; use run-blackbox");
      const fs::path data = run_args.data;
      const atp::Dataset target = atp::load_dataset(data / "target_train");
      const atp::Dataset eval = atp::load_dataset(data / "target_eval");
      atp::StageContext ctx{&eval, run_args.out, nullptr};
      if (run_args.resume.empty()) {
        const atp::Dataset source = atp::load_dataset(data / "source_train");
        finish_run(atp::run_atp(source, target, cfg, ctx).record, run_args.out);
      } else {
        const std::string start = next_stage(run_args.resume);
        finish_run(atp::resume_atp(open_model(run_args.resume, cfg), start, target, cfg, ctx).record, run_args.out);
      }
    }

    if (bb->parsed()) {
      const atp::ATPConfig cfg = read_config(bb_args.config);
      const fs::path data = bb_args.data;
      const atp::Dataset target = atp::load_dataset(data / "target_train");
      const atp::Dataset eval = atp::load_dataset(data / "target_eval");
      const auto preds = atp::load_probability_maps(bb_preds);
      atp::StageContext ctx{&eval, bb_args.out, nullptr};
      finish_run(atp::run_blackbox(preds, target, cfg, ctx).record, bb_args.out);
    }

    if (ex->parsed()) {
      const auto ckpt = atp::load_checkpoint(ex_ckpt);
      const atp::Dataset data = open_dataset(ex_data, "target_train");
      atp::export_predictions(ckpt.model, data, ex_out);
      spdlog::info("wrote {} predictions to {}", data.size(), ex_out);
    }

    if (ev->parsed()) {
      const auto ckpt = atp::load_checkpoint(ev_ckpt);
      const atp::Dataset data = open_dataset(ev_data, "target_eval");
      const atp::IoUReport rep = atp::evaluate_model(ckpt.model, data);
      atp::RunRecord record;
      record.run_id = fs::path(ev_ckpt).stem().string();
      atp::StageResult r;
      r.stage = "eval";
      r.miou = rep.miou_or_zero();
      r.per_class_iou = rep.per_class_iou;
      r.checkpoint = ev_ckpt;
      record.stages.push_back(r);
      atp::emit_report(std::span<const atp::RunRecord>(&record, 1), ev_report);
      std::printf("mIoU %.4f\n", rep.miou_or_zero());
    }
  } catch (const atp::Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
