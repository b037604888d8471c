// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "atp/error.hpp"
#include "atp/propagation.hpp"
#include "rng.hpp"
#include "support/oracles.hpp"

using namespace atp;

namespace {

Image random_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Image img(h, w);
  for (auto& v : img.data) v = d(rng);
  return img;
}

void check_split(const SplitAssignment& s, std::span<const double> scores, double ratio) {
  const std::size_t n = scores.size();
  CHECK(s.easy_ids.size() == static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))));
  std::vector<int> seen(n, 0);
  for (auto i : s.easy_ids) ++seen.at(i);
  for (auto i : s.hard_ids) ++seen.at(i);
  CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
  // Brute force: an easy id never outranks a hard id under (score, id) order.
  for (auto e : s.easy_ids)
    for (auto h : s.hard_ids) CHECK((scores[e] < scores[h] || (scores[e] == scores[h] && e < h)));
}

}  // namespace

TEST_CASE("image ranking") {
  ProbabilityMap uniform(2, 2, 4, std::vector<double>(16, 0.25));
  CHECK(rank_image(uniform) == doctest::Approx(1.0));
  ProbabilityMap onehot(2, 2, 4);
  for (std::size_t i = 0; i < 4; ++i) onehot.pixel(i)[i % 4] = 1.0;
  CHECK(rank_image(onehot) == doctest::Approx(0.0));
  ProbabilityMap half(1, 2, 2, {0.5, 0.5, 1.0, 0.0});
  CHECK(rank_image(half) == doctest::Approx(0.5));

  std::mt19937_64 rng(3);
  const ProbabilityMap p = oracle::random_map(rng, 4, 4, 3);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  ProbabilityMap q(4, 4, 3);
  for (std::size_t i = 0; i < 16; ++i) std::copy_n(p.pixel(perm[i]).begin(), 3, q.pixel(i).begin());
  CHECK(rank_image(q) == doctest::Approx(rank_image(p)).epsilon(1e-12));
}

TEST_CASE("split examples") {
  const std::vector<double> s{0.1, 0.4, 0.2, 0.3};
  const SplitAssignment a = split_dataset(s, 0.5);
  CHECK(a.easy_ids == std::vector<std::size_t>{0, 2});
  CHECK(a.hard_ids == std::vector<std::size_t>{3, 1});
  CHECK(a.is_easy(2));
  CHECK_FALSE(a.is_easy(1));

  const SplitAssignment all = split_dataset(s, 1.0);
  CHECK(all.easy_ids.size() == 4);
  CHECK(all.hard_ids.empty());

  const std::vector<double> tie(5, 0.3);
  CHECK(split_dataset(tie, 0.4).easy_ids == std::vector<std::size_t>{0, 1});

  CHECK_THROWS_AS(split_dataset(std::vector<double>{}, 0.5), InvalidInput);
  CHECK_THROWS_AS(split_dataset(s, 0.0), InvalidInput);
  CHECK_THROWS_AS(split_dataset(s, 1.5), InvalidInput);
}

TEST_CASE("split invariants on random score vectors") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> len(1, 60), coarse(0, 9);
  std::uniform_real_distribution<double> ratio(0.01, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> scores(len(rng));
    // Coarse values force ties.
    for (auto& v : scores) v = coarse(rng) / 10.0;
    const double r = ratio(rng);
    check_split(split_dataset(scores, r), scores, r);
  }
}

TEST_CASE("split manifest") {
  const std::vector<double> s{0.25, 0.5};
  CHECK(split_manifest(split_dataset(s, 0.5)) == "0,0.250000000,easy\n1,0.500000000,hard\n");
}

TEST_CASE("classmix") {
  std::mt19937_64 rng(5);
  const Image a = random_image(rng, 4, 4), b = random_image(rng, 4, 4);

  SUBCASE("a single class pastes nothing") {
    const HardLabelMask one(4, 4, 2);
    const MixResult m = classmix(a, one, b, 1);
    CHECK(m.image == b);
    CHECK(m.labels == HardLabelMask(4, 4));
    CHECK(m.selected_classes.empty());
  }
  SUBCASE("paste-all returns the source image and labels") {
    HardLabelMask lab(4, 4, 0);
    for (int x = 0; x < 4; ++x) lab.at(1, x) = 3;
    const MixResult m = classmix(a, lab, b, 1, true);
    CHECK(m.image == a);
    CHECK(m.labels == lab);
  }
  SUBCASE("4x4 two-class fixture") {
    HardLabelMask lab(4, 4, 0);
    for (int y = 0; y < 4; ++y)
      for (int x = 2; x < 4; ++x) lab.at(y, x) = 1;
    lab.at(0, 0) = kIgnore;
    std::set<int> chosen;
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
      const MixResult m = classmix(a, lab, b, seed);
      REQUIRE(m.selected_classes.size() == 1);
      const int c = m.selected_classes[0];
      chosen.insert(c);
      Image expect_img = b;
      HardLabelMask expect_lab(4, 4);
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
          if (lab.at(y, x) == c) {
            expect_lab.at(y, x) = static_cast<std::uint8_t>(c);
            for (int ch = 0; ch < 3; ++ch) expect_img.at(ch, y, x) = a.at(ch, y, x);
          }
      CHECK(m.image == expect_img);
      CHECK(m.labels == expect_lab);
      CHECK(classmix(a, lab, b, seed).image == m.image);
    }
    CHECK(chosen == std::set<int>{0, 1});
  }
  SUBCASE("mixed labels agree with the source image") {
    for (int t = 0; t < 20; ++t) {
      const Image x = random_image(rng, 8, 8), y = random_image(rng, 8, 8);
      HardLabelMask lab(8, 8);
      std::uniform_int_distribution<int> d(0, 5);
      for (auto& l : lab.labels) {
        const int v = d(rng);
        l = v == 5 ? kIgnore : static_cast<std::uint8_t>(v);
      }
      const MixResult m = classmix(x, lab, y, static_cast<std::uint64_t>(t));
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
          if (m.labels.at(r, c) == kIgnore) {
            for (int ch = 0; ch < 3; ++ch) CHECK(m.image.at(ch, r, c) == y.at(ch, r, c));
          } else {
            CHECK(m.labels.at(r, c) == lab.at(r, c));
            for (int ch = 0; ch < 3; ++ch) CHECK(m.image.at(ch, r, c) == x.at(ch, r, c));
          }
        }
    }
  }
}

TEST_CASE("photometric augmentation") {
  std::mt19937_64 rng(8);
  const Image img = random_image(rng, 12, 12);
  CHECK(photometric_augment(img, AugmentationOp::color_jitter(0, 0, 0), 3) == img);
  CHECK(photometric_augment(img, AugmentationOp::gaussian_blur(0.0), 3) == img);
  const Image j = photometric_augment(img, AugmentationOp::color_jitter(0.8, 0.8, 0.8), 3);
  CHECK_FALSE(j == img);
  CHECK(photometric_augment(img, AugmentationOp::color_jitter(0.8, 0.8, 0.8), 3) == j);
  for (float v : j.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  AugmentationOp mix;
  mix.kind = AugmentationKind::kClassMix;
  CHECK_THROWS_AS(photometric_augment(img, mix, 0), InvalidInput);

  const Image constant(9, 7, 0.37f);
  const Image bc = photometric_augment(constant, AugmentationOp::gaussian_blur(1.3), 0);
  for (float v : bc.data) CHECK(v == doctest::Approx(0.37f).epsilon(1e-5));
}

TEST_CASE("gaussian blur matches direct 2-D convolution") {
  const double sigma = 1.0;
  const int radius = 3;
  // Content sits in the interior; the zero border is wider than the kernel.
  Image img(20, 20, 0.0f);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (int c = 0; c < 3; ++c)
    for (int y = radius; y < 20 - radius; ++y)
      for (int x = radius; x < 20 - radius; ++x) img.at(c, y, x) = d(rng);
  const Image out = photometric_augment(img, AugmentationOp::gaussian_blur(sigma), 0);

  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  for (int c = 0; c < 3; ++c) {
    double mean_in = 0.0, mean_out = 0.0;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x) {
        double acc = 0.0;
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dx = -radius; dx <= radius; ++dx) {
            const int yy = std::clamp(y + dy, 0, 19), xx = std::clamp(x + dx, 0, 19);
            acc += k[dy + radius] * k[dx + radius] * img.at(c, yy, xx);
          }
        CHECK(out.at(c, y, x) == doctest::Approx(acc).epsilon(1e-5));
        mean_in += img.at(c, y, x);
        mean_out += out.at(c, y, x);
      }
    CHECK(std::abs(mean_in - mean_out) / 400.0 < 1e-3);
  }
}

TEST_CASE("consistency pair target") {
  std::mt19937_64 rng(4);
  const Image easy = random_image(rng, 4, 4), hard = random_image(rng, 4, 4);
  HardLabelMask lab(4, 4, 0);
  for (int x = 0; x < 4; ++x) lab.at(3, x) = 2;
  const ProbabilityMap teacher = oracle::random_map(rng, 4, 4, 3);
  PropagationOptions opts;
  const ConsistencyPair pair = build_consistency_pair(teacher, hard, easy, lab, opts, 11);
  const MixResult mix = classmix(easy, lab, hard, rng::mix(11, 0));
  CHECK(pair.student_input == mix.image);
  for (std::size_t i = 0; i < 16; ++i) {
    if (mix.pasted[i]) {
      CHECK(pair.target.pixel(i)[lab.labels[i]] == 1.0);
    } else {
      for (int c = 0; c < 3; ++c) CHECK(pair.target.pixel(i)[c] == teacher.pixel(i)[c]);
    }
  }
}

namespace {

ModelShape tiny_shape() {
  ModelShape s;
  s.num_classes = 3;
  s.feature_dim = 8;
  s.width1 = 4;
  s.width2 = 4;
  s.width3 = 4;
  return s;
}

}  // namespace

TEST_CASE("propagation objective") {
  std::mt19937_64 rng(21);
  const Image easy = random_image(rng, 4, 4), hard = random_image(rng, 4, 4);
  HardLabelMask lab(4, 4, 1);
  for (int x = 0; x < 4; ++x) lab.at(0, x) = 0;
  PropagationOptions opts;
  opts.photometric = {AugmentationOp::color_jitter(0.3, 0.3, 0.3), AugmentationOp::gaussian_blur(0.7)};
  opts.confidence_gate = 0.0;  // every pixel contributes on this untrained model
  const SegmentationModel m = build_model(tiny_shape(), 2);
  const TeacherSnapshot teacher = snapshot_teacher(m);

  SUBCASE("matches the composition of the two loss ops") {
    std::vector<float> g(m.parameter_count(), 0.0f);
    SampleTape tape(m, g);
    const PropagationLoss loss = propagation_objective(tape, teacher, {&easy, &lab}, hard, opts, 99);

    const ProbabilityMap pe = m.forward(easy);
    const double ce = cross_entropy_loss(pe, lab).value;
    const ConsistencyPair pair = build_consistency_pair(teacher.forward(hard), hard, easy, lab, opts, 99);
    const double cons = consistency_loss(pair.target, m.forward(pair.student_input), {}, {}, 1.0, 0.0).value;
    CHECK(loss.supervised.value == doctest::Approx(ce).epsilon(1e-12));
    CHECK(loss.consistency.value == doctest::Approx(cons).epsilon(1e-12));
    CHECK(loss.total == doctest::Approx(ce + cons).epsilon(1e-12));

    std::vector<float> ref(m.parameter_count(), 0.0f);
    ForwardCache c1, c2;
    const ProbabilityMap p1 = m.forward(easy, c1);
    std::vector<double> g1(p1.values().size(), 0.0);
    cross_entropy_loss(p1, lab, g1);
    m.backward(c1, g1, ref);
    const ProbabilityMap p2 = m.forward(pair.student_input, c2);
    std::vector<double> g2(p2.values().size(), 0.0);
    consistency_loss(pair.target, p2, {}, g2, 1.0, 0.0);
    m.backward(c2, g2, ref);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(g[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  }
  SUBCASE("without an easy sample only the hard term remains") {
    PropagationOptions plain;
    plain.confidence_gate = 0.0;
    std::vector<float> g(m.parameter_count(), 0.0f);
    SampleTape tape(m, g);
    const PropagationLoss loss = propagation_objective(tape, teacher, {}, hard, plain, 1);
    CHECK(loss.supervised.value == 0.0);
    const double expect = consistency_loss(teacher.forward(hard), m.forward(hard), {}, {}, 1.0, 0.0).value;
    CHECK(loss.total == doctest::Approx(expect));
  }
  SUBCASE("non-negative") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      std::vector<float> g(m.parameter_count(), 0.0f);
      SampleTape tape(m, g);
      CHECK(propagation_objective(tape, teacher, {&easy, &lab}, hard, opts, s).total >= 0.0);
    }
  }
}

TEST_CASE("confident teacher, perfect labels and identity augmentation give zero loss") {
  SegmentationModel m = build_model(tiny_shape(), 4);
  // Classifier weights zero, bias strongly favouring class 2: one-hot output.
  auto p = m.parameters();
  const std::size_t off = m.classifier_offset();
  std::fill(p.begin() + static_cast<std::ptrdiff_t>(off), p.end(), 0.0f);
  p[p.size() - 1] = 800.0f;
  std::mt19937_64 rng(1);
  const Image easy = random_image(rng, 4, 4), hard = random_image(rng, 4, 4);
  const HardLabelMask lab(4, 4, 2);
  std::vector<float> g(m.parameter_count(), 0.0f);
  SampleTape tape(m, g);
  const PropagationLoss loss = propagation_objective(tape, snapshot_teacher(m), {&easy, &lab}, hard, {}, 5);
  CHECK(std::abs(loss.total) < 1e-9);
}
