// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <string>

#include <fmt/format.h>

#include "atp/error.hpp"
#include "atp/evaluation.hpp"
#include "atp/image_io.hpp"
#include "atp/pipeline.hpp"

namespace atp {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr std::array<Rgb, 8> kSeries = {{{31, 119, 180},
                                         {255, 127, 14},
                                         {44, 160, 44},
                                         {214, 39, 40},
                                         {148, 103, 189},
                                         {140, 86, 75},
                                         {227, 119, 194},
                                         {127, 127, 127}}};

// 3x5 glyphs for tick labels, one row per 3-bit mask.
const std::map<char, std::array<std::uint8_t, 5>>& glyphs() {
  static const std::map<char, std::array<std::uint8_t, 5>> g = {
      {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
      {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
      {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}}};
  return g;
}

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 255) {}

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    std::copy(c.begin(), c.end(), px_.begin() + (static_cast<std::ptrdiff_t>(y) * w_ + x) * 3);
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
  }

  void text(int x, int y, const std::string& s, Rgb c, int scale = 2) {
    for (char ch : s) {
      const auto it = glyphs().find(ch);
      if (it != glyphs().end())
        for (int r = 0; r < 5; ++r)
          for (int col = 0; col < 3; ++col)
            if (it->second[r] >> (2 - col) & 1) rect(x + col * scale, y + r * scale, x + col * scale + scale - 1, y + r * scale + scale - 1, c);
      x += 4 * scale;
    }
  }

  void save(const std::filesystem::path& path) const { write_png_rgb(path, w_, h_, px_); }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

/// Plot frame with a y range and horizontal grid labels.
struct Frame {
  int left = 60, right = 620, top = 20, bottom = 380;
  double y0 = 0.0, y1 = 1.0;

  int ypix(double v) const {
    const double t = y1 > y0 ? (v - y0) / (y1 - y0) : 0.5;
    return bottom - static_cast<int>(std::lround(t * (bottom - top)));
  }

  void draw(Canvas& c) const {
    const Rgb grid{225, 225, 225}, axis{60, 60, 60};
    for (int k = 0; k <= 4; ++k) {
      const double v = y0 + (y1 - y0) * k / 4.0;
      c.line(left, ypix(v), right, ypix(v), grid);
      c.text(4, ypix(v) - 5, fmt::format("{:.2f}", v), axis);
    }
    c.line(left, top, left, bottom, axis);
    c.line(left, bottom, right, bottom, axis);
  }
};

void plot_loss_curves(std::span<const RunRecord> records, const std::filesystem::path& path) {
  std::vector<std::vector<double>> series;
  double lo = 1e300, hi = -1e300;
  for (const auto& r : records) {
    std::vector<double> s;
    for (const auto& e : r.losses)
      for (const auto& [k, v] : e.terms)
        if (k == "total" || (k == "ce" && e.stage == "warmup") || (k == "kd" && e.stage == "distill")) s.push_back(v);
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    series.push_back(std::move(s));
  }
  Canvas c(640, 400);
  Frame f;
  if (lo > hi) lo = 0.0, hi = 1.0;
  f.y0 = lo;
  f.y1 = hi > lo ? hi : lo + 1.0;
  f.draw(c);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const Rgb col = kSeries[k % kSeries.size()];
    for (std::size_t i = 1; i < s.size(); ++i) {
      auto x = [&](std::size_t j) { return f.left + static_cast<int>((f.right - f.left) * j / std::max<std::size_t>(1, s.size() - 1)); };
      c.line(x(i - 1), f.ypix(s[i - 1]), x(i), f.ypix(s[i]), col);
    }
  }
  c.save(path);
}

void plot_stage_bars(std::span<const RunRecord> records, const std::filesystem::path& path) {
  Canvas c(640, 400);
  Frame f;
  f.draw(c);
  std::size_t bars = 0;
  for (const auto& r : records) bars += r.stages.size() + 1;
  const double slot = static_cast<double>(f.right - f.left - 10) / static_cast<double>(std::max<std::size_t>(1, bars));
  double x = f.left + 10;
  for (const auto& r : records) {
    for (std::size_t s = 0; s < r.stages.size(); ++s, x += slot) {
      if (!r.stages[s].miou) continue;
      c.rect(static_cast<int>(x), f.ypix(*r.stages[s].miou), static_cast<int>(x + slot * 0.8), f.bottom - 1,
             kSeries[s % kSeries.size()]);
    }
    x += slot;
  }
  c.save(path);
}

void plot_sweep(const std::vector<std::pair<double, double>>& points, const std::filesystem::path& path) {
  Canvas c(640, 400);
  Frame f;
  double lo = 1.0, hi = 0.0;
  for (const auto& [x, y] : points) {
    lo = std::min(lo, y);
    hi = std::max(hi, y);
  }
  f.y0 = std::max(0.0, std::floor(lo * 10.0 - 1.0) / 10.0);
  f.y1 = std::min(1.0, std::ceil(hi * 10.0 + 1.0) / 10.0);
  f.draw(c);
  double xmin = points.front().first, xmax = points.back().first;
  auto xpix = [&](double v) {
    return f.left + 20 + static_cast<int>(std::lround((xmax > xmin ? (v - xmin) / (xmax - xmin) : 0.5) * (f.right - f.left - 40)));
  };
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int px = xpix(points[i].first), py = f.ypix(points[i].second);
    c.rect(px - 3, py - 3, px + 3, py + 3, kSeries[0]);
    c.text(px - 12, f.bottom + 6, fmt::format("{:g}", points[i].first), {60, 60, 60});
    if (i > 0) c.line(xpix(points[i - 1].first), f.ypix(points[i - 1].second), px, py, kSeries[0]);
  }
  c.save(path);
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void emit_report(std::span<const RunRecord> records, const std::filesystem::path& out_dir) {
  if (records.empty()) throw InvalidInput("emit_report needs at least one record");
  std::filesystem::create_directories(out_dir);
  std::size_t classes = 0;
  for (const auto& r : records)
    for (const auto& s : r.stages) classes = std::max(classes, s.per_class_iou.size());

  auto header = [&](const std::string& lead) {
    std::string h = lead;
    for (std::size_t c = 0; c < classes; ++c) h += fmt::format(",iou_{}", c);
    return h + "\n";
  };
  auto row = [&](const std::string& lead, const StageResult* s) {
    std::string line = lead + "," + (s && s->miou ? fmt::format("{:.6f}", *s->miou) : std::string());
    for (std::size_t c = 0; c < classes; ++c)
      line += "," + (s && c < s->per_class_iou.size() ? fmt::format("{:.6f}", s->per_class_iou[c]) : std::string());
    return line + "\n";
  };

  std::string results = header("run_id,stage,miou");
  std::string stages = header("run_id,stage,miou");
  for (const auto& r : records) {
    const StageResult* last = r.stages.empty() ? nullptr : &r.stages.back();
    results += row(r.run_id + "," + (last ? last->stage : std::string()), last);
    for (const auto& s : r.stages) stages += row(r.run_id + "," + s.stage, &s);
  }
  write_file(out_dir / "results.csv", results);
  write_file(out_dir / "stages.csv", stages);

  std::string summary = "generated " + timestamp() + "\n";
  for (const auto& r : records) {
    summary += fmt::format("\nrun {}\n", r.run_id);
    for (const auto& [k, v] : r.sweep) summary += fmt::format("  sweep {} = {:g}\n", k, v);
    for (const auto& s : r.stages)
      summary += fmt::format("  {:<10} mIoU {}\n", s.stage, s.miou ? fmt::format("{:.4f}", *s.miou) : "n/a");
    for (std::size_t k = 0; k < r.teach_stats.size(); ++k)
      summary += fmt::format("  teach stage {} ignore fraction {:.4f}\n", k, r.teach_stats[k].ignore_fraction);
  }
  write_file(out_dir / "summary.txt", summary);

  plot_loss_curves(records, out_dir / "loss_curves.png");
  plot_stage_bars(records, out_dir / "stage_miou.png");

  std::map<std::string, std::vector<std::pair<double, double>>> sweeps;
  for (const auto& r : records)
    if (const auto m = r.final_miou())
      for (const auto& [k, v] : r.sweep) sweeps[k].emplace_back(v, *m);
  for (auto& [param, points] : sweeps) {
    std::sort(points.begin(), points.end());
    plot_sweep(points, out_dir / ("sensitivity_" + param + ".png"));
  }
}

}  // namespace atp
