// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>

#include "atp/error.hpp"
#include "atp/image_io.hpp"
#include "atp/synthetic_data.hpp"
#include "binary_io.hpp"

namespace atp {

using nlohmann::json;

namespace {

std::string indexed_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.png", i);
  return buf;
}

json shift_json(const AppearanceShift& s) {
  return {{"hue_degrees", s.hue_degrees},
          {"noise_sigma", s.noise_sigma},
          {"blur_radius", s.blur_radius},
          {"texture_amplitude", s.texture_amplitude}};
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw InvalidInput("unknown key '" + k + "' in " + where);
}

AppearanceShift shift_from(const json& j, const std::string& where) {
  reject_unknown(j, {"hue_degrees", "noise_sigma", "blur_radius", "texture_amplitude"}, where);
  AppearanceShift s;
  s.hue_degrees = j.value("hue_degrees", s.hue_degrees);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.blur_radius = j.value("blur_radius", s.blur_radius);
  s.texture_amplitude = j.value("texture_amplitude", s.texture_amplitude);
  return s;
}

json spec_json(const SceneSpec& spec) {
  json palette = json::array();
  for (const auto& c : spec.palette) palette.push_back({c[0], c[1], c[2]});
  return {{"height", spec.height},         {"width", spec.width},           {"num_classes", spec.num_classes},
          {"min_shapes", spec.min_shapes}, {"max_shapes", spec.max_shapes}, {"min_radius", spec.min_radius},
          {"max_radius", spec.max_radius}, {"palette", palette},            {"color_jitter", spec.color_jitter},
          {"source", shift_json(spec.source)}, {"target", shift_json(spec.target)}};
}

SceneSpec spec_from(const json& j) {
  reject_unknown(j,
                 {"height", "width", "num_classes", "min_shapes", "max_shapes", "min_radius", "max_radius", "palette",
                  "color_jitter", "source", "target"},
                 "scene spec");
  SceneSpec spec = SceneSpec::benchmark_default();
  spec.height = j.value("height", spec.height);
  spec.width = j.value("width", spec.width);
  spec.num_classes = j.value("num_classes", spec.num_classes);
  spec.min_shapes = j.value("min_shapes", spec.min_shapes);
  spec.max_shapes = j.value("max_shapes", spec.max_shapes);
  spec.min_radius = j.value("min_radius", spec.min_radius);
  spec.max_radius = j.value("max_radius", spec.max_radius);
  spec.color_jitter = j.value("color_jitter", spec.color_jitter);
  if (j.contains("palette")) {
    spec.palette.clear();
    for (const auto& c : j.at("palette")) spec.palette.push_back({c.at(0).get<float>(), c.at(1).get<float>(), c.at(2).get<float>()});
  }
  if (j.contains("source")) spec.source = shift_from(j.at("source"), "scene spec source");
  if (j.contains("target")) spec.target = shift_from(j.at("target"), "scene spec target");
  return spec;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string scene_spec_to_json(const SceneSpec& spec) { return spec_json(spec).dump(2) + "\n"; }

SceneSpec scene_spec_from_json(const std::string& text) {
  try {
    return spec_from(json::parse(text));
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("invalid scene spec: ") + e.what());
  }
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir, const SceneSpec* spec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  int height = 0, width = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Image& img = d.image(i);
    height = img.height;
    width = img.width;
    std::vector<std::uint8_t> rgb(img.plane() * 3);
    for (std::size_t p = 0; p < img.plane(); ++p)
      for (int c = 0; c < 3; ++c)
        rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[c * img.plane() + p], 0.0f, 1.0f) * 255.0f));
    write_png_rgb(dir / "images" / indexed_name(i), img.width, img.height, rgb);
    const HardLabelMask& lab = d.label(i);
    write_png_gray(dir / "labels" / indexed_name(i), lab.width, lab.height, lab.labels);
  }
  json meta = {{"count", d.size()}, {"height", height}, {"width", width}, {"num_classes", d.num_classes()}};
  if (spec) meta["spec"] = spec_json(*spec);
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const json meta = read_json(dir / "meta.json");
  std::size_t count = 0;
  int num_classes = 0;
  try {
    count = meta.at("count").get<std::size_t>();
    num_classes = meta.at("num_classes").get<int>();
  } catch (const json::exception& e) {
    throw FormatError("incomplete " + (dir / "meta.json").string() + ": " + e.what());
  }
  if (count == 0) throw FormatError("dataset " + dir.string() + " is empty");
  std::vector<Image> images(count);
  std::vector<HardLabelMask> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto image_path = dir / "images" / indexed_name(i);
    const RawImage raw = read_png(image_path, 3);
    Image img(raw.height, raw.width);
    for (std::size_t p = 0; p < img.plane(); ++p)
      for (int c = 0; c < 3; ++c) img.data[c * img.plane() + p] = raw.pixels[p * 3 + c] / 255.0f;
    const auto label_path = dir / "labels" / indexed_name(i);
    const RawImage lraw = read_png(label_path, 1);
    if (lraw.width != raw.width || lraw.height != raw.height)
      throw FormatError("label " + label_path.string() + " does not match image size");
    HardLabelMask lab(lraw.height, lraw.width);
    lab.labels = lraw.pixels;
    for (auto l : lab.labels)
      if (l != kIgnore && l >= num_classes)
        throw FormatError("label " + label_path.string() + " has class " + std::to_string(l) + " out of range");
    images[i] = std::move(img);
    labels[i] = std::move(lab);
  }
  return Dataset(std::move(images), std::move(labels), num_classes);
}

void save_benchmark(const Benchmark& b, const SceneSpec& spec, std::uint64_t seed, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_dataset(b.source_train, dir / "source_train", &spec);
  save_dataset(b.source_eval, dir / "source_eval", &spec);
  save_dataset(b.target_train, dir / "target_train", &spec);
  save_dataset(b.target_eval, dir / "target_eval", &spec);
  json info = {{"seed", seed}, {"spec", spec_json(spec)}};
  write_text(dir / "benchmark.json", info.dump(2) + "\n");
}

Benchmark load_benchmark(const std::filesystem::path& dir, bool with_source) {
  Benchmark b;
  if (with_source) {
    b.source_train = load_dataset(dir / "source_train");
    b.source_eval = load_dataset(dir / "source_eval");
  }
  b.target_train = load_dataset(dir / "target_train");
  b.target_eval = load_dataset(dir / "target_eval");
  return b;
}

namespace {
constexpr char kMapsMagic[5] = "ATPF";
constexpr std::uint32_t kMapsVersion = 1;
}  // namespace

void save_probability_maps(std::span<const ProbabilityMap> maps, const std::filesystem::path& path) {
  std::uint32_t h = 0, w = 0, c = 0;
  if (!maps.empty()) {
    h = maps.front().height();
    w = maps.front().width();
    c = maps.front().num_classes();
    for (const auto& m : maps)
      if (!m.same_shape(maps.front())) throw InvalidInput("probability maps must share one shape");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMapsMagic, 4);
  for (std::uint32_t v : {kMapsVersion, static_cast<std::uint32_t>(maps.size()), h, w, c}) binary::put(out, v);
  std::vector<float> buf;
  for (const auto& m : maps) {
    buf.assign(m.values().begin(), m.values().end());
    binary::put_span<float>(out, buf);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<ProbabilityMap> load_probability_maps(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string what = "probability map file " + path.string();
  binary::expect_magic(in, kMapsMagic, what);
  const auto version = binary::get<std::uint32_t>(in, what);
  if (version != kMapsVersion) throw FormatError("unsupported version " + std::to_string(version) + " in " + what);
  const auto count = binary::get<std::uint32_t>(in, what);
  const auto h = binary::get<std::uint32_t>(in, what);
  const auto w = binary::get<std::uint32_t>(in, what);
  const auto c = binary::get<std::uint32_t>(in, what);
  const std::uintmax_t expected = 24 + static_cast<std::uintmax_t>(count) * h * w * c * sizeof(float);
  const auto actual = std::filesystem::file_size(path);
  if (actual != expected)
    throw FormatError(what + " has " + std::to_string(actual) + " bytes, header implies " + std::to_string(expected));
  if (count > 0 && (h == 0 || w == 0 || c < 2)) throw FormatError("degenerate shape in " + what);
  std::vector<ProbabilityMap> maps;
  maps.reserve(count);
  std::vector<float> buf(static_cast<std::size_t>(h) * w * c);
  for (std::uint32_t i = 0; i < count; ++i) {
    binary::get_span<float>(in, buf, what);
    maps.emplace_back(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c),
                      std::vector<double>(buf.begin(), buf.end()));
  }
  return maps;
}

}  // namespace atp
