// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>

#include "atp/error.hpp"
#include "atp/pipeline.hpp"

namespace atp {

using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw InvalidInput("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidInput("config key '" + name_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  void optim(StageOptim& o) {
    read("lr", o.lr);
    read("classifier_lr", o.classifier_lr);
    read("batch_size", o.batch_size);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw InvalidInput("unknown config key '" + (name_.empty() ? k : name_ + "." + k) + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidInput("config: " + what);
}

void check_optim(const StageOptim& o, const std::string& stage) {
  require(o.lr >= 0.0 && o.classifier_lr >= 0.0, stage + " learning rates must be non-negative");
  require(o.batch_size >= 1, stage + ".batch_size must be at least 1");
}

void validate(const ATPConfig& c) {
  require(c.model.num_classes >= 2 && c.model.num_classes < kIgnore, "model.num_classes must be in [2, 254]");
  require(c.model.feature_dim >= 8, "model.feature_dim must be at least 8");
  require(c.model.width1 > 0 && c.model.width2 > 0 && c.model.width3 > 0, "model widths must be positive");
  require(c.momentum >= 0.0 && c.momentum < 1.0, "schedule.momentum must be in [0, 1)");
  require(c.weight_decay >= 0.0, "schedule.weight_decay must be non-negative");
  require(c.poly_power >= 0.0, "schedule.poly_power must be non-negative");
  check_optim(c.warmup.optim, "warmup");
  check_optim(c.align.optim, "align");
  check_optim(c.teach.optim, "teach");
  check_optim(c.propagate.optim, "propagate");
  check_optim(c.blackbox.optim, "blackbox");
  require(c.warmup.max_epochs >= 0, "warmup.max_epochs must be non-negative");
  require(c.align.alpha > 0.0, "align.alpha must be positive");
  require(c.align.gamma >= 0.0, "align.gamma must be non-negative");
  require(c.align.lambda_div >= 0.0, "align.lambda_div must be non-negative");
  require(c.align.epochs >= 0, "align.epochs must be non-negative");
  require(c.teach.K > 0.0 && c.teach.K <= 1.0, "teach.K must be in (0, 1]");
  require(c.teach.lambda_neg > 0.0 && c.teach.lambda_neg < 1.0, "teach.lambda_neg must be in (0, 1)");
  require(c.teach.stages >= 0, "teach.stages must be non-negative");
  require(c.teach.epochs_per_stage >= 0 && c.teach.epochs_per_stage <= 10, "teach.epochs_per_stage must be in [0, 10]");
  require(c.propagate.ratio > 0.0 && c.propagate.ratio <= 1.0, "propagate.ratio must be in (0, 1]");
  require(c.propagate.cyc_weight >= 0.0, "propagate.cyc_weight must be non-negative");
  require(c.propagate.epochs >= 0, "propagate.epochs must be non-negative");
  require(c.propagate.blur_sigma >= 0.0 && c.blackbox.blur_sigma >= 0.0, "blur sigmas must be non-negative");
  require(c.blackbox.kd_epochs >= 0, "blackbox.kd_epochs must be non-negative");
}

}  // namespace

ATPConfig config_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("config is not valid JSON: ") + e.what());
  }
  ATPConfig c;
  Section top(root, "");
  std::string mode = "white_box";
  top.read("mode", mode);
  if (mode == "white_box")
    c.mode = RunMode::kWhiteBox;
  else if (mode == "black_box")
    c.mode = RunMode::kBlackBox;
  else
    throw InvalidInput("config: mode must be white_box or black_box, got '" + mode + "'");
  top.read("seed", c.seed);
  if (const json* j = top.child("model")) {
    Section s(*j, "model");
    s.read("num_classes", c.model.num_classes);
    s.read("feature_dim", c.model.feature_dim);
    s.read("width1", c.model.width1);
    s.read("width2", c.model.width2);
    s.read("width3", c.model.width3);
    s.finish();
  }
  if (const json* j = top.child("schedule")) {
    Section s(*j, "schedule");
    s.read("momentum", c.momentum);
    s.read("weight_decay", c.weight_decay);
    s.read("poly_power", c.poly_power);
    s.finish();
  }
  if (const json* j = top.child("warmup")) {
    Section s(*j, "warmup");
    s.optim(c.warmup.optim);
    s.read("max_epochs", c.warmup.max_epochs);
    s.read("target_loss", c.warmup.target_loss);
    s.finish();
  }
  if (const json* j = top.child("align")) {
    Section s(*j, "align");
    s.optim(c.align.optim);
    s.read("alpha", c.align.alpha);
    s.read("gamma", c.align.gamma);
    s.read("lambda_div", c.align.lambda_div);
    s.read("div_weight", c.align.div_weight);
    s.read("epochs", c.align.epochs);
    s.finish();
  }
  if (const json* j = top.child("teach")) {
    Section s(*j, "teach");
    s.optim(c.teach.optim);
    s.read("K", c.teach.K);
    s.read("lambda_neg", c.teach.lambda_neg);
    s.read("stages", c.teach.stages);
    s.read("epochs_per_stage", c.teach.epochs_per_stage);
    s.read("use_npl", c.teach.use_npl);
    s.finish();
  }
  if (const json* j = top.child("propagate")) {
    Section s(*j, "propagate");
    s.optim(c.propagate.optim);
    s.read("ratio", c.propagate.ratio);
    s.read("cyc_weight", c.propagate.cyc_weight);
    s.read("epochs", c.propagate.epochs);
    s.read("jitter_brightness", c.propagate.jitter_brightness);
    s.read("jitter_contrast", c.propagate.jitter_contrast);
    s.read("jitter_saturation", c.propagate.jitter_saturation);
    s.read("blur_sigma", c.propagate.blur_sigma);
    s.finish();
  }
  if (const json* j = top.child("blackbox")) {
    Section s(*j, "blackbox");
    s.optim(c.blackbox.optim);
    s.read("kd_epochs", c.blackbox.kd_epochs);
    s.read("augment", c.blackbox.augment);
    s.read("jitter_strength", c.blackbox.jitter_strength);
    s.read("blur_sigma", c.blackbox.blur_sigma);
    s.finish();
  }
  top.finish();
  validate(c);
  c.source_text = text;
  return c;
}

std::string config_to_json(const ATPConfig& c) {
  auto optim = [](const StageOptim& o) {
    return json{{"lr", o.lr}, {"classifier_lr", o.classifier_lr}, {"batch_size", o.batch_size}};
  };
  json warmup = optim(c.warmup.optim);
  warmup["max_epochs"] = c.warmup.max_epochs;
  warmup["target_loss"] = c.warmup.target_loss;
  json align = optim(c.align.optim);
  align["alpha"] = c.align.alpha;
  align["gamma"] = c.align.gamma;
  align["lambda_div"] = c.align.lambda_div;
  align["div_weight"] = c.align.div_weight;
  align["epochs"] = c.align.epochs;
  json teach = optim(c.teach.optim);
  teach["K"] = c.teach.K;
  teach["lambda_neg"] = c.teach.lambda_neg;
  teach["stages"] = c.teach.stages;
  teach["epochs_per_stage"] = c.teach.epochs_per_stage;
  teach["use_npl"] = c.teach.use_npl;
  json prop = optim(c.propagate.optim);
  prop["ratio"] = c.propagate.ratio;
  prop["cyc_weight"] = c.propagate.cyc_weight;
  prop["epochs"] = c.propagate.epochs;
  prop["jitter_brightness"] = c.propagate.jitter_brightness;
  prop["jitter_contrast"] = c.propagate.jitter_contrast;
  prop["jitter_saturation"] = c.propagate.jitter_saturation;
  prop["blur_sigma"] = c.propagate.blur_sigma;
  json bb = optim(c.blackbox.optim);
  bb["kd_epochs"] = c.blackbox.kd_epochs;
  bb["augment"] = c.blackbox.augment;
  bb["jitter_strength"] = c.blackbox.jitter_strength;
  bb["blur_sigma"] = c.blackbox.blur_sigma;
  json root = {
      {"mode", c.mode == RunMode::kWhiteBox ? "white_box" : "black_box"},
      {"seed", c.seed},
      {"model",
       {{"num_classes", c.model.num_classes},
        {"feature_dim", c.model.feature_dim},
        {"width1", c.model.width1},
        {"width2", c.model.width2},
        {"width3", c.model.width3}}},
      {"schedule", {{"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"poly_power", c.poly_power}}},
      {"warmup", warmup},
      {"align", align},
      {"teach", teach},
      {"propagate", prop},
      {"blackbox", bb}};
  return root.dump(2) + "\n";
}

ATPConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return config_from_json(text.str());
}

TrainSchedule stage_schedule(const ATPConfig& cfg, const StageOptim& optim, std::int64_t max_iter) {
  TrainSchedule s;
  s.base_lr = optim.lr;
  s.classifier_lr = optim.classifier_lr;
  s.momentum = cfg.momentum;
  s.weight_decay = cfg.weight_decay;
  s.poly_power = cfg.poly_power;
  s.max_iter = std::max<std::int64_t>(1, max_iter);
  return s;
}

}  // namespace atp
