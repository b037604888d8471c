// SPDX-License-Identifier: Apache-2.0
#include "atp/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "atp/error.hpp"
#include "atp/parallel.hpp"
#include "binary_io.hpp"
#include "nn_ops.hpp"

namespace atp {

namespace detail {

// Layer order is fixed; the classifier is always the last entry so its
// parameters form the tail of the flat buffer.
enum LayerId { kEnc1, kEnc2, kEnc3, kEnc4, kDec2, kDec1, kFeature, kClassifier, kLayerCount };

struct Layout {
  std::array<nn::Conv, kLayerCount> convs;
  std::size_t total = 0;
  std::size_t classifier_offset = 0;

  explicit Layout(const ModelShape& s) {
    auto add = [this](int in, int out, int kernel, bool standardized) {
      nn::Conv c{in, out, kernel, standardized, 0, 0, 0};
      c.weight_offset = total;
      total += c.weight_count();
      if (standardized) {
        c.gain_offset = total;
        total += out;
      }
      c.bias_offset = total;
      total += out;
      return c;
    };
    convs[kEnc1] = add(3, s.width1, 3, true);
    convs[kEnc2] = add(s.width1, s.width2, 3, true);
    convs[kEnc3] = add(s.width2, s.width3, 3, true);
    convs[kEnc4] = add(s.width3, s.width3, 3, true);
    convs[kDec2] = add(s.width3, s.width2, 3, true);
    convs[kDec1] = add(s.width2, s.width1, 3, true);
    convs[kFeature] = add(s.width1, s.feature_dim, 1, true);
    classifier_offset = total;
    convs[kClassifier] = add(s.feature_dim, s.num_classes, 1, false);
  }
};

struct Workspace {
  std::array<std::vector<float>, kLayerCount> weights;
  std::array<std::vector<float>, kLayerCount> cols;
  nn::Tensor x, r1, p1, r2, p2, r3, r4, u2, r5, s2, u1, r6, s1, f, logits;
  ProbabilityMap probs;
};

}  // namespace detail

using detail::LayerId;

ForwardCache::ForwardCache() : ws_(std::make_unique<detail::Workspace>()) {}
ForwardCache::~ForwardCache() = default;
ForwardCache::ForwardCache(ForwardCache&&) noexcept = default;
ForwardCache& ForwardCache::operator=(ForwardCache&&) noexcept = default;

SegmentationModel::SegmentationModel(const ModelShape& shape, std::vector<float> params)
    : shape_(shape), layout_(std::make_shared<detail::Layout>(shape)), params_(std::move(params)) {
  if (shape.num_classes < 2 || shape.num_classes >= kIgnore) throw InvalidInput("num_classes must lie in [2, 254]");
  if (shape.feature_dim < 1 || shape.width1 < 1 || shape.width2 < 1 || shape.width3 < 1)
    throw InvalidInput("layer widths must be positive");
  if (params_.size() != layout_->total)
    throw InvalidInput("parameter buffer has " + std::to_string(params_.size()) + " entries, architecture needs " +
                       std::to_string(layout_->total));
}

std::size_t SegmentationModel::classifier_offset() const { return layout_->classifier_offset; }

ProbabilityMap SegmentationModel::forward(const Image& image) const {
  ForwardCache cache;
  return forward(image, cache);
}

ProbabilityMap SegmentationModel::forward(const Image& image, ForwardCache& cache) const {
  if (image.height % 4 != 0 || image.width % 4 != 0 || image.height == 0 || image.width == 0)
    throw InvalidInput("image sides must be positive multiples of 4");
  auto& ws = *cache.ws_;
  const auto& L = layout_->convs;
  for (int i = 0; i < detail::kLayerCount; ++i) ws.weights[i] = nn::effective_weights(L[i], params_);

  auto conv = [&](LayerId id, const nn::Tensor& in, nn::Tensor& out, bool relu) {
    nn::conv_forward(L[id], ws.weights[id], params_, in, out, ws.cols[id]);
    if (relu) nn::relu_inplace(out);
  };
  auto add_into = [](const nn::Tensor& a, const nn::Tensor& b, nn::Tensor& out) {
    out.reshape(a.channels, a.height, a.width);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  };

  ws.x.channels = 3;
  ws.x.height = image.height;
  ws.x.width = image.width;
  ws.x.data = image.data;

  conv(detail::kEnc1, ws.x, ws.r1, true);
  nn::avg_pool2(ws.r1, ws.p1);
  conv(detail::kEnc2, ws.p1, ws.r2, true);
  nn::avg_pool2(ws.r2, ws.p2);
  conv(detail::kEnc3, ws.p2, ws.r3, true);
  conv(detail::kEnc4, ws.r3, ws.r4, true);
  nn::upsample2(ws.r4, ws.u2);
  conv(detail::kDec2, ws.u2, ws.r5, true);
  add_into(ws.r5, ws.r2, ws.s2);
  nn::upsample2(ws.s2, ws.u1);
  conv(detail::kDec1, ws.u1, ws.r6, true);
  add_into(ws.r6, ws.r1, ws.s1);
  conv(detail::kFeature, ws.s1, ws.f, true);
  conv(detail::kClassifier, ws.f, ws.logits, false);

  const int classes = shape_.num_classes;
  const std::size_t hw = ws.logits.plane();
  ProbabilityMap p(image.height, image.width, classes);
  std::vector<float> e(classes);
  for (std::size_t i = 0; i < hw; ++i) {
    float zmax = ws.logits.data[i];
    for (int c = 1; c < classes; ++c) zmax = std::max(zmax, ws.logits.data[c * hw + i]);
    float sum = 0.0f;
    for (int c = 0; c < classes; ++c) sum += e[c] = std::exp(ws.logits.data[c * hw + i] - zmax);
    auto out = p.pixel(i);
    for (int c = 0; c < classes; ++c) out[c] = e[c] / sum;
  }
  ws.probs = p;
  return p;
}

void SegmentationModel::backward(const ForwardCache& cache, std::span<const double> grad_probs,
                                 std::span<float> grad) const {
  const auto& ws = *cache.ws_;
  const auto& L = layout_->convs;
  if (grad.size() != params_.size()) throw InvalidInput("gradient buffer does not match parameter count");
  if (grad_probs.size() != ws.probs.values().size()) throw InvalidInput("probability gradient does not match forward");

  const int classes = shape_.num_classes;
  const std::size_t hw = ws.logits.plane();
  std::vector<double> grad_logits(grad_probs.size());
  softmax_backward(ws.probs, grad_probs, grad_logits);
  nn::Tensor dlogits(classes, ws.logits.height, ws.logits.width);
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < classes; ++c) dlogits.data[c * hw + i] = static_cast<float>(grad_logits[i * classes + c]);

  auto back = [&](LayerId id, const nn::Tensor& in, const nn::Tensor& dout, nn::Tensor* din) {
    nn::conv_backward(L[id], ws.weights[id], params_, in, ws.cols[id], dout, din, grad);
  };
  auto accumulate = [](nn::Tensor& dst, const nn::Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
  };

  nn::Tensor df, ds1, dr6, du1, ds2, dr5, du2, dr4, dr3, dp2, dr2, dp1, dr1;
  back(detail::kClassifier, ws.f, dlogits, &df);
  nn::relu_backward_inplace(ws.f, df);
  back(detail::kFeature, ws.s1, df, &ds1);

  dr6 = ds1;
  nn::relu_backward_inplace(ws.r6, dr6);
  back(detail::kDec1, ws.u1, dr6, &du1);
  nn::upsample2_backward(du1, ds2);

  dr5 = ds2;
  nn::relu_backward_inplace(ws.r5, dr5);
  back(detail::kDec2, ws.u2, dr5, &du2);
  nn::upsample2_backward(du2, dr4);

  nn::relu_backward_inplace(ws.r4, dr4);
  back(detail::kEnc4, ws.r3, dr4, &dr3);
  nn::relu_backward_inplace(ws.r3, dr3);
  back(detail::kEnc3, ws.p2, dr3, &dp2);

  nn::avg_pool2_backward(dp2, dr2);
  accumulate(dr2, ds2);
  nn::relu_backward_inplace(ws.r2, dr2);
  back(detail::kEnc2, ws.p1, dr2, &dp1);

  nn::avg_pool2_backward(dp1, dr1);
  accumulate(dr1, ds1);
  nn::relu_backward_inplace(ws.r1, dr1);
  back(detail::kEnc1, ws.x, dr1, nullptr);
}

SegmentationModel build_model(const ModelShape& shape, std::uint64_t seed) {
  if (shape.num_classes < 2) throw InvalidInput("build_model needs at least 2 classes");
  if (shape.feature_dim < 8) throw InvalidInput("build_model needs feature_dim >= 8");
  const detail::Layout layout(shape);
  std::vector<float> params(layout.total, 0.0f);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (int i = 0; i < detail::kLayerCount; ++i) {
    const auto& c = layout.convs[i];
    const float stddev = c.standardized ? 1.0f : 1.0f / std::sqrt(static_cast<float>(c.fan_in()));
    for (std::size_t j = 0; j < c.weight_count(); ++j) params[c.weight_offset + j] = stddev * normal(rng);
    if (c.standardized)
      std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(c.gain_offset), c.out, std::sqrt(2.0f));
  }
  return SegmentationModel(shape, std::move(params));
}

SegmentationModel build_model(int num_classes, int feature_dim, std::uint64_t seed) {
  ModelShape shape;
  shape.num_classes = num_classes;
  shape.feature_dim = feature_dim;
  return build_model(shape, seed);
}

SegmentationModel& freeze_classifier(SegmentationModel& m, bool frozen) {
  m.set_classifier_frozen(frozen);
  return m;
}

TeacherSnapshot snapshot_teacher(const SegmentationModel& m) { return TeacherSnapshot(m); }

double lr_at(const TrainSchedule& schedule, std::int64_t iter) {
  if (schedule.max_iter <= 0 || iter >= schedule.max_iter) return 0.0;
  if (iter <= 0) return schedule.base_lr;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(schedule.max_iter);
  return schedule.base_lr * std::pow(frac, schedule.poly_power);
}

void optimize_step(SegmentationModel& m, SgdState& state, std::span<const float> grad, const TrainSchedule& schedule,
                   std::int64_t iter) {
  auto params = m.parameters();
  if (grad.size() != params.size()) throw InvalidInput("gradient size does not match parameter count");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw TrainingError("non-finite gradient at parameter " + std::to_string(i) + " (iteration " +
                          std::to_string(iter) + ")");
  if (state.momentum.size() != params.size()) state.momentum.assign(params.size(), 0.0f);

  const double decay = schedule.base_lr > 0.0 ? lr_at(schedule, iter) / schedule.base_lr : 0.0;
  const auto lr_body = static_cast<float>(schedule.base_lr * decay);
  const auto lr_head = static_cast<float>(schedule.classifier_lr * decay);
  const auto mu = static_cast<float>(schedule.momentum);
  const auto wd = static_cast<float>(schedule.weight_decay);
  const std::size_t head = m.classifier_offset();
  const std::size_t end = m.classifier_frozen() ? head : params.size();
  for (std::size_t i = 0; i < end; ++i) {
    float& v = state.momentum[i];
    v = mu * v + grad[i] + wd * params[i];
    params[i] -= (i < head ? lr_body : lr_head) * v;
  }
}

double train_batch(SegmentationModel& m, SgdState& state, const TrainSchedule& schedule,
                   std::span<const std::size_t> samples, const SampleObjective& objective) {
  if (samples.empty()) return 0.0;
  const std::size_t n = m.parameter_count();
  std::vector<std::vector<float>> grads(samples.size());
  std::vector<double> losses(samples.size(), 0.0);
  const SegmentationModel& frozen_view = m;
  parallel_for(samples.size(), [&](std::size_t k) {
    grads[k].assign(n, 0.0f);
    SampleTape tape(frozen_view, grads[k]);
    losses[k] = objective(samples[k], tape);
  });
  std::vector<float> total(n, 0.0f);
  double loss = 0.0;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    for (std::size_t i = 0; i < n; ++i) total[i] += grads[k][i];
    loss += losses[k];
  }
  const float inv = 1.0f / static_cast<float>(samples.size());
  for (auto& g : total) g *= inv;
  loss /= static_cast<double>(samples.size());
  if (!std::isfinite(loss)) throw TrainingError("loss diverged (non-finite) at iteration " + std::to_string(state.iteration));
  optimize_step(m, state, total, schedule, state.iteration);
  ++state.iteration;
  return loss;
}

double train_batch_joint(SegmentationModel& m, SgdState& state, const TrainSchedule& schedule,
                         std::span<const Image* const> images, const BatchTerm& term) {
  if (images.empty()) return 0.0;
  const std::size_t n = m.parameter_count();
  const std::size_t b = images.size();
  const SegmentationModel& frozen_view = m;
  std::vector<ForwardCache> caches(b);
  std::vector<ProbabilityMap> probs(b);
  parallel_for(b, [&](std::size_t k) { probs[k] = frozen_view.forward(*images[k], caches[k]); });
  std::vector<std::vector<double>> grad_probs(b);
  for (std::size_t k = 0; k < b; ++k) grad_probs[k].assign(probs[k].values().size(), 0.0);
  const double loss = term(probs, grad_probs);
  if (!std::isfinite(loss)) throw TrainingError("loss diverged (non-finite) at iteration " + std::to_string(state.iteration));
  std::vector<std::vector<float>> grads(b);
  parallel_for(b, [&](std::size_t k) {
    grads[k].assign(n, 0.0f);
    frozen_view.backward(caches[k], grad_probs[k], grads[k]);
  });
  std::vector<float> total(n, 0.0f);
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t i = 0; i < n; ++i) total[i] += grads[k][i];
  optimize_step(m, state, total, schedule, state.iteration);
  ++state.iteration;
  return loss;
}

namespace {
constexpr char kCheckpointMagic[5] = "ATPC";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const SegmentationModel& m, const SgdState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, 4);
  binary::put<std::uint32_t>(out, kCheckpointVersion);
  const auto& s = m.shape();
  for (int v : {s.num_classes, s.feature_dim, s.width1, s.width2, s.width3}) binary::put<std::uint32_t>(out, v);
  binary::put<std::uint32_t>(out, m.classifier_frozen() ? 1u : 0u);
  binary::put<std::int64_t>(out, state.iteration);
  binary::put<std::uint64_t>(out, m.parameter_count());
  binary::put_span<float>(out, m.parameters());
  binary::put<std::uint64_t>(out, state.momentum.size());
  binary::put_span<float>(out, state.momentum);
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelShape* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string what = "checkpoint " + path.string();
  binary::expect_magic(in, kCheckpointMagic, what);
  const auto version = binary::get<std::uint32_t>(in, what);
  if (version != kCheckpointVersion) throw FormatError("unsupported version " + std::to_string(version) + " in " + what);
  ModelShape shape;
  shape.num_classes = static_cast<int>(binary::get<std::uint32_t>(in, what));
  shape.feature_dim = static_cast<int>(binary::get<std::uint32_t>(in, what));
  shape.width1 = static_cast<int>(binary::get<std::uint32_t>(in, what));
  shape.width2 = static_cast<int>(binary::get<std::uint32_t>(in, what));
  shape.width3 = static_cast<int>(binary::get<std::uint32_t>(in, what));
  if (expected && !(*expected == shape))
    throw FormatError(what + " architecture (C=" + std::to_string(shape.num_classes) +
                      ", D=" + std::to_string(shape.feature_dim) + ") is incompatible with the requested model");
  const auto flags = binary::get<std::uint32_t>(in, what);
  SgdState state;
  state.iteration = binary::get<std::int64_t>(in, what);
  const auto count = binary::get<std::uint64_t>(in, what);
  if (count != detail::Layout(shape).total) throw FormatError("parameter count mismatch in " + what);
  std::vector<float> params(count);
  binary::get_span<float>(in, params, what);
  const auto mcount = binary::get<std::uint64_t>(in, what);
  if (mcount != 0 && mcount != count) throw FormatError("momentum buffer size mismatch in " + what);
  state.momentum.resize(mcount);
  binary::get_span<float>(in, state.momentum, what);
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + what);
  SegmentationModel model(shape, std::move(params));
  model.set_classifier_frozen(flags & 1u);
  return {std::move(model), std::move(state)};
}

}  // namespace atp
