// SPDX-License-Identifier: Apache-2.0
//
// Dense CHW feature-map primitives used by the segmentation network. Each op
// has an explicit backward; convolutions go through im2col + GEMM.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace atp::nn {

struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0f) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }
  void reshape(int c, int h, int w) {
    channels = c;
    height = h;
    width = w;
    data.assign(static_cast<std::size_t>(c) * h * w, 0.0f);
  }
};

/// Conv layer descriptor; parameters live in an external flat buffer.
/// Standardized layers use scaled weight standardization with a per-output
/// gain: w_hat = gain * (w - mean) / (std * sqrt(fan_in)).
struct Conv {
  int in = 0;
  int out = 0;
  int kernel = 1;  // 1 or 3 (3 uses zero padding of 1)
  bool standardized = false;
  std::size_t weight_offset = 0;
  std::size_t gain_offset = 0;  // only when standardized
  std::size_t bias_offset = 0;

  int fan_in() const { return in * kernel * kernel; }
  std::size_t weight_count() const { return static_cast<std::size_t>(out) * fan_in(); }
  std::size_t param_count() const { return weight_count() + (standardized ? out : 0) + out; }
};

/// Effective (post-standardization) weights for one conv.
std::vector<float> effective_weights(const Conv& conv, std::span<const float> params);

/// y = conv(x). `col` receives the im2col buffer needed by backward (3x3 only).
void conv_forward(const Conv& conv, std::span<const float> weights, std::span<const float> params, const Tensor& x,
                  Tensor& y, std::vector<float>& col);

/// Accumulates parameter gradients into grad_params and, when dx is non-null,
/// writes the input gradient.
void conv_backward(const Conv& conv, std::span<const float> weights, std::span<const float> params, const Tensor& x,
                   const std::vector<float>& col, const Tensor& dy, Tensor* dx, std::span<float> grad_params);

void relu_inplace(Tensor& t);
/// dy *= (y > 0), with y the post-activation output.
void relu_backward_inplace(const Tensor& y, Tensor& dy);

void avg_pool2(const Tensor& x, Tensor& y);
void avg_pool2_backward(const Tensor& dy, Tensor& dx);

void upsample2(const Tensor& x, Tensor& y);
void upsample2_backward(const Tensor& dy, Tensor& dx);

}  // namespace atp::nn
