// SPDX-License-Identifier: Apache-2.0
#include "nn_ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace atp::nn {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

constexpr double kStandardizeEps = 1e-5;

void im2col3(const Tensor& x, std::vector<float>& col) {
  const int h = x.height;
  const int w = x.width;
  const std::size_t hw = x.plane();
  col.resize(static_cast<std::size_t>(x.channels) * 9 * hw);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.data.data() + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* dst = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          float* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, 0.0f);
            continue;
          }
          const float* srow = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          std::fill(row, row + x0, 0.0f);
          std::copy(srow + x0 + dx, srow + x1 + dx, row + x0);
          std::fill(row + x1, row + w, 0.0f);
        }
      }
    }
  }
}

void col2im3(const std::vector<float>& col, Tensor& dx) {
  const int h = dx.height;
  const int w = dx.width;
  const std::size_t hw = dx.plane();
  std::fill(dx.data.begin(), dx.data.end(), 0.0f);
  for (int c = 0; c < dx.channels; ++c) {
    float* dst = dx.data.data() + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* src = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int ddx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const float* row = src + static_cast<std::size_t>(y) * w;
          float* drow = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -ddx);
          const int x1 = std::min(w, w - ddx);
          for (int xx = x0; xx < x1; ++xx) drow[xx + ddx] += row[xx];
        }
      }
    }
  }
}

}  // namespace

std::vector<float> effective_weights(const Conv& conv, std::span<const float> params) {
  const std::size_t n = conv.fan_in();
  std::vector<float> w(params.begin() + conv.weight_offset, params.begin() + conv.weight_offset + conv.weight_count());
  if (!conv.standardized) return w;
  const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
  for (int o = 0; o < conv.out; ++o) {
    float* row = w.data() + o * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double scale = params[conv.gain_offset + o] * inv_sqrt_n / std::sqrt(var + kStandardizeEps);
    for (std::size_t j = 0; j < n; ++j) row[j] = static_cast<float>((row[j] - mean) * scale);
  }
  return w;
}

void conv_forward(const Conv& conv, std::span<const float> weights, std::span<const float> params, const Tensor& x,
                  Tensor& y, std::vector<float>& col) {
  const auto hw = static_cast<Eigen::Index>(x.plane());
  y.reshape(conv.out, x.height, x.width);
  const float* input = x.data.data();
  if (conv.kernel == 3) {
    im2col3(x, col);
    input = col.data();
  } else {
    col.clear();
  }
  ConstMatMap wm(weights.data(), conv.out, conv.fan_in());
  ConstMatMap in(input, conv.fan_in(), hw);
  MatMap out(y.data.data(), conv.out, hw);
  out.noalias() = wm * in;
  for (int o = 0; o < conv.out; ++o) out.row(o).array() += params[conv.bias_offset + o];
}

void conv_backward(const Conv& conv, std::span<const float> weights, std::span<const float> params, const Tensor& x,
                   const std::vector<float>& col, const Tensor& dy, Tensor* dx, std::span<float> grad_params) {
  const auto hw = static_cast<Eigen::Index>(x.plane());
  const int n = conv.fan_in();
  const float* input = conv.kernel == 3 ? col.data() : x.data.data();
  ConstMatMap in(input, n, hw);
  ConstMatMap dout(dy.data.data(), conv.out, hw);

  RowMatrix dw = dout * in.transpose();
  // Fixed summation order: Eigen's vectorized sum depends on buffer alignment.
  for (int o = 0; o < conv.out; ++o) {
    const float* row = dy.data.data() + static_cast<std::size_t>(o) * hw;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < hw; ++i) acc += row[i];
    grad_params[conv.bias_offset + o] += static_cast<float>(acc);
  }

  if (conv.standardized) {
    // Chain through w_hat = gain * u / sqrt(n), u = (w - mean) / s.
    const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
    std::vector<double> u(n), du(n);
    for (int o = 0; o < conv.out; ++o) {
      const float* raw = params.data() + conv.weight_offset + static_cast<std::size_t>(o) * n;
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += raw[j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (raw[j] - mean) * (raw[j] - mean);
      var /= n;
      const double s = std::sqrt(var + kStandardizeEps);
      const double gain = params[conv.gain_offset + o];
      double dgain = 0.0, mean_du = 0.0, mean_duu = 0.0;
      for (int j = 0; j < n; ++j) {
        u[j] = (raw[j] - mean) / s;
        dgain += dw(o, j) * u[j] * inv_sqrt_n;
        du[j] = dw(o, j) * gain * inv_sqrt_n;
        mean_du += du[j];
        mean_duu += du[j] * u[j];
      }
      mean_du /= n;
      mean_duu /= n;
      grad_params[conv.gain_offset + o] += static_cast<float>(dgain);
      float* gw = grad_params.data() + conv.weight_offset + static_cast<std::size_t>(o) * n;
      for (int j = 0; j < n; ++j) gw[j] += static_cast<float>((du[j] - mean_du - u[j] * mean_duu) / s);
    }
  } else {
    MatMap gw(grad_params.data() + conv.weight_offset, conv.out, n);
    gw += dw;
  }

  if (dx == nullptr) return;
  dx->reshape(conv.in, x.height, x.width);
  ConstMatMap wm(weights.data(), conv.out, n);
  if (conv.kernel == 3) {
    std::vector<float> dcol(static_cast<std::size_t>(n) * hw);
    MatMap dc(dcol.data(), n, hw);
    dc.noalias() = wm.transpose() * dout;
    col2im3(dcol, *dx);
  } else {
    MatMap dxm(dx->data.data(), n, hw);
    dxm.noalias() = wm.transpose() * dout;
  }
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data) v = std::max(v, 0.0f);
}

void relu_backward_inplace(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (!(y.data[i] > 0.0f)) dy.data[i] = 0.0f;
}

void avg_pool2(const Tensor& x, Tensor& y) {
  y.reshape(x.channels, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.data.data() + c * x.plane();
    float* dst = y.data.data() + c * y.plane();
    for (int yy = 0; yy < y.height; ++yy) {
      const float* r0 = src + static_cast<std::size_t>(2 * yy) * x.width;
      const float* r1 = r0 + x.width;
      for (int xx = 0; xx < y.width; ++xx)
        dst[yy * y.width + xx] = 0.25f * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
    }
  }
}

void avg_pool2_backward(const Tensor& dy, Tensor& dx) {
  dx.reshape(dy.channels, dy.height * 2, dy.width * 2);
  for (int c = 0; c < dy.channels; ++c) {
    const float* src = dy.data.data() + c * dy.plane();
    float* dst = dx.data.data() + c * dx.plane();
    for (int yy = 0; yy < dx.height; ++yy)
      for (int xx = 0; xx < dx.width; ++xx) dst[yy * dx.width + xx] = 0.25f * src[(yy / 2) * dy.width + xx / 2];
  }
}

void upsample2(const Tensor& x, Tensor& y) {
  y.reshape(x.channels, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.data.data() + c * x.plane();
    float* dst = y.data.data() + c * y.plane();
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx) dst[yy * y.width + xx] = src[(yy / 2) * x.width + xx / 2];
  }
}

void upsample2_backward(const Tensor& dy, Tensor& dx) {
  dx.reshape(dy.channels, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c) {
    const float* src = dy.data.data() + c * dy.plane();
    float* dst = dx.data.data() + c * dx.plane();
    for (int yy = 0; yy < dy.height; ++yy)
      for (int xx = 0; xx < dy.width; ++xx) dst[(yy / 2) * dx.width + xx / 2] += src[yy * dy.width + xx];
  }
}

}  // namespace atp::nn
