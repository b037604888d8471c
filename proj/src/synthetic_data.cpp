// SPDX-License-Identifier: Apache-2.0
#include "atp/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "atp/error.hpp"
#include "atp/parallel.hpp"
#include "rng.hpp"

namespace atp {

namespace {

struct Shape {
  ShapeKind kind;
  std::uint8_t label;
  double cx, cy, radius, angle, aspect;
  std::array<float, 3> color;
};

std::array<float, 3> hue_color(double hue_deg, double saturation, double value) {
  // HSV -> RGB
  const double h = std::fmod(hue_deg, 360.0) / 60.0;
  const double c = value * saturation;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = value - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

std::array<float, 3> palette_color(const SceneSpec& spec, int cls) {
  if (cls < static_cast<int>(spec.palette.size())) return spec.palette[cls];
  if (cls == 0) return {0.5f, 0.5f, 0.5f};
  const int shapes = std::max(1, spec.num_classes - 1);
  return hue_color(360.0 * (cls - 1) / shapes, 0.7, 0.85);
}

bool covers(const Shape& s, double px, double py) {
  const double dx = px - s.cx;
  const double dy = py - s.cy;
  const double ca = std::cos(s.angle);
  const double sa = std::sin(s.angle);
  const double u = ca * dx + sa * dy;
  const double v = -sa * dx + ca * dy;
  const double r = s.radius;
  switch (s.kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case ShapeKind::kRectangle:
      return std::abs(u) <= 0.9 * r && std::abs(v) <= 0.9 * r * s.aspect;
    case ShapeKind::kTriangle: {
      // Equilateral triangle with circumradius r, vertex pointing along +u.
      const double inner = 0.5 * r;
      if (u < -inner) return false;
      const double half_width = (r - u) / std::sqrt(3.0);
      return u <= r && std::abs(v) <= half_width;
    }
    case ShapeKind::kDiamond:
      return std::abs(u) / r + std::abs(v) / (0.6 * r) <= 1.0;
    case ShapeKind::kCross:
      return (std::abs(u) <= r && std::abs(v) <= 0.3 * r) || (std::abs(v) <= r && std::abs(u) <= 0.3 * r);
  }
  return false;
}

std::vector<Shape> sample_shapes(const SceneSpec& spec, std::mt19937_64& rng) {
  const int kinds = spec.num_classes - 1;
  std::uniform_int_distribution<int> count_dist(spec.min_shapes, spec.max_shapes);
  const int count = count_dist(rng);

  std::vector<int> order(kinds);
  for (int k = 0; k < kinds; ++k) order[k] = k + 1;
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> any_class(1, kinds);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-spec.color_jitter, spec.color_jitter);

  std::vector<Shape> shapes;
  for (int i = 0; i < count; ++i) {
    Shape s{};
    s.label = static_cast<std::uint8_t>(i < kinds ? order[i] : any_class(rng));
    s.kind = static_cast<ShapeKind>(s.label - 1);
    s.radius = spec.min_radius + (spec.max_radius - spec.min_radius) * unit(rng);
    s.angle = 2.0 * std::numbers::pi * unit(rng);
    s.aspect = 0.5 + 0.4 * unit(rng);
    // Centers stay outside every earlier shape's radius.
    for (int attempt = 0; attempt < 64; ++attempt) {
      s.cx = s.radius * 0.5 + (spec.width - s.radius) * unit(rng);
      s.cy = s.radius * 0.5 + (spec.height - s.radius) * unit(rng);
      const bool clear = std::all_of(shapes.begin(), shapes.end(), [&](const Shape& o) {
        return std::hypot(o.cx - s.cx, o.cy - s.cy) >= std::max(o.radius, s.radius);
      });
      if (clear) break;
    }
    const auto base = palette_color(spec, s.label);
    for (int c = 0; c < 3; ++c) s.color[c] = std::clamp(base[c] + static_cast<float>(jitter(rng)), 0.0f, 1.0f);
    shapes.push_back(s);
  }
  return shapes;
}

struct Texture {
  double fx, fy, phase, amplitude;
  double at(double x, double y) const { return amplitude * std::sin(fx * x + fy * y + phase); }
};

void render(const SceneSpec& spec, const std::vector<Shape>& shapes, const Texture& texture, Image& image,
            HardLabelMask& labels) {
  constexpr int kSuper = 4;
  const auto bg = palette_color(spec, 0);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      std::uint8_t label = 0;
      for (const auto& s : shapes)
        if (covers(s, x + 0.5, y + 0.5)) label = s.label;
      labels.at(y, x) = label;

      std::array<double, 3> acc{0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper;
          const double py = y + (sy + 0.5) / kSuper;
          const std::array<float, 3>* color = &bg;
          for (const auto& s : shapes)
            if (covers(s, px, py)) color = &s.color;
          for (int c = 0; c < 3; ++c) acc[c] += (*color)[c];
        }
      }
      const double shade = texture.at(x, y);
      for (int c = 0; c < 3; ++c)
        image.at(c, y, x) = static_cast<float>(std::clamp(acc[c] / (kSuper * kSuper) + shade, 0.0, 1.0));
    }
  }
}

void box_blur(Image& image, int radius) {
  if (radius <= 0) return;
  const int h = image.height;
  const int w = image.width;
  std::vector<float> tmp(image.plane());
  for (int c = 0; c < 3; ++c) {
    float* plane = image.data.data() + c * image.plane();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double sum = 0.0;
        for (int k = -radius; k <= radius; ++k) sum += plane[y * w + std::clamp(x + k, 0, w - 1)];
        tmp[y * w + x] = static_cast<float>(sum / (2 * radius + 1));
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double sum = 0.0;
        for (int k = -radius; k <= radius; ++k) sum += tmp[std::clamp(y + k, 0, h - 1) * w + x];
        plane[y * w + x] = static_cast<float>(sum / (2 * radius + 1));
      }
  }
}

}  // namespace

SceneSpec SceneSpec::benchmark_default() {
  SceneSpec spec;
  // luma + 0.3 along the red-cyan chroma axis.
  const double r = 0.3 * 2.0 / std::sqrt(6.0), g = -0.3 / std::sqrt(6.0);
  spec.palette = {{0.5f, 0.5f, 0.5f}};
  for (double luma : {0.25, 0.75})
    for (double side : {1.0, -1.0})
      spec.palette.push_back({static_cast<float>(luma + side * r), static_cast<float>(luma + side * g),
                              static_cast<float>(luma + side * g)});
  spec.target.hue_degrees = 60.0;
  spec.target.noise_sigma = 0.05;
  spec.target.blur_radius = 1;
  return spec;
}

SceneSpec SceneSpec::zero_shift() {
  SceneSpec spec = benchmark_default();
  spec.target = spec.source;
  return spec;
}

Dataset::Dataset(std::vector<Image> images, std::vector<HardLabelMask> labels, int num_classes)
    : images_(std::move(images)), labels_(std::move(labels)), num_classes_(num_classes) {
  if (images_.size() != labels_.size()) throw InvalidInput("dataset image and label counts differ");
}

const Image& Dataset::image(std::size_t i) const {
  reads_.bump();
  return images_.at(i);
}

const HardLabelMask& Dataset::label(std::size_t i) const {
  reads_.bump();
  return labels_.at(i);
}

void rotate_hue(Image& image, double degrees) {
  if (degrees == 0.0) return;
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t);
  const double sn = std::sin(t);
  const double k = 1.0 / std::sqrt(3.0);
  const double a = (1.0 - cs) / 3.0;
  // Rodrigues rotation about (1,1,1)/sqrt(3).
  const double m[3][3] = {{cs + a, a - k * sn, a + k * sn}, {a + k * sn, cs + a, a - k * sn}, {a - k * sn, a + k * sn, cs + a}};
  const std::size_t n = image.plane();
  for (std::size_t i = 0; i < n; ++i) {
    const double rgb[3] = {image.data[i], image.data[n + i], image.data[2 * n + i]};
    for (int r = 0; r < 3; ++r) {
      const double v = m[r][0] * rgb[0] + m[r][1] * rgb[1] + m[r][2] * rgb[2];
      image.data[r * n + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

void apply_shift(Image& image, const AppearanceShift& shift, std::uint64_t noise_seed) {
  rotate_hue(image, shift.hue_degrees);
  box_blur(image, shift.blur_radius);
  if (shift.noise_sigma > 0.0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> noise(0.0, shift.noise_sigma);
    for (auto& v : image.data) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  }
}

void quantize_8bit(Image& image) {
  for (auto& v : image.data) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

Dataset generate_domain(const SceneSpec& spec, Domain domain, std::uint32_t stream, std::size_t first,
                        std::size_t count, std::uint64_t seed) {
  if (spec.num_classes < 2) throw InvalidInput("scene spec needs at least 2 classes");
  if (spec.num_classes - 1 > kMaxShapeKinds)
    throw InvalidInput("scene spec supports at most " + std::to_string(kMaxShapeKinds + 1) + " classes");
  if (spec.height <= 0 || spec.width <= 0) throw InvalidInput("scene size must be positive");
  if (spec.min_shapes < 0 || spec.max_shapes < spec.min_shapes) throw InvalidInput("invalid shapes-per-image range");
  if (!(spec.min_radius > 0.0) || spec.max_radius < spec.min_radius) throw InvalidInput("invalid radius range");

  const AppearanceShift& shift = domain == Domain::kSource ? spec.source : spec.target;
  std::vector<Image> images(count);
  std::vector<HardLabelMask> labels(count);
  parallel_for(count, [&](std::size_t k) {
    const std::uint64_t index = first + k;
    const std::uint64_t key = rng::mix(seed, rng::mix(static_cast<std::uint64_t>(domain) << 32 | stream, index));
    std::mt19937_64 rng(key);
    const auto shapes = sample_shapes(spec, rng);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Texture texture{0.1 + 0.4 * unit(rng), 0.1 + 0.4 * unit(rng), 2.0 * std::numbers::pi * unit(rng),
                          shift.texture_amplitude};
    Image img(spec.height, spec.width);
    HardLabelMask lab(spec.height, spec.width, 0);
    render(spec, shapes, texture, img, lab);
    apply_shift(img, shift, rng());
    quantize_8bit(img);
    images[k] = std::move(img);
    labels[k] = std::move(lab);
  });
  return Dataset(std::move(images), std::move(labels), spec.num_classes);
}

std::pair<Dataset, Dataset> generate_pair(const SceneSpec& spec, std::size_t n_source, std::size_t n_target,
                                          std::uint64_t seed) {
  if (n_source < 1 || n_target < 1) throw InvalidInput("generate_pair needs at least one image per domain");
  return {generate_domain(spec, Domain::kSource, 0, 0, n_source, seed),
          generate_domain(spec, Domain::kTarget, 0, 0, n_target, seed)};
}

Benchmark generate_benchmark(const SceneSpec& spec, const BenchmarkSizes& sizes, std::uint64_t seed) {
  return {generate_domain(spec, Domain::kSource, 0, 0, sizes.source_train, seed),
          generate_domain(spec, Domain::kSource, 1, 0, sizes.source_eval, seed),
          generate_domain(spec, Domain::kTarget, 0, 0, sizes.target_train, seed),
          generate_domain(spec, Domain::kTarget, 1, 0, sizes.target_eval, seed)};
}

}  // namespace atp
