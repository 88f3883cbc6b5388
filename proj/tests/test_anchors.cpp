#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tbloc/anchors.hpp"
#include "tbloc/box.hpp"
#include "tbloc/error.hpp"
#include "tbloc/rng.hpp"

using namespace tbloc;

namespace {

// Straight transcription of the anchor layout, used as the reference.
std::vector<Box> reference_anchors(std::size_t image, const AnchorConfig& c) {
  std::vector<Box> out;
  for (std::size_t l = 0; l < c.strides.size(); ++l) {
    const std::size_t s = c.strides[l], g = image / s;
    for (std::size_t i = 0; i < g; ++i) {
      for (std::size_t j = 0; j < g; ++j) {
        for (double r : c.ratios) {
          for (double k : c.scales) {
            const double w = c.base_sizes[l] * k * std::sqrt(r), h = c.base_sizes[l] * k / std::sqrt(r);
            out.push_back(box_from_center((j + 0.5) * s, (i + 0.5) * s, w, h));
          }
        }
      }
    }
  }
  return out;
}

double ref_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

Box random_box(std::mt19937_64& rng, double lo, double hi, double image) {
  std::uniform_real_distribution<double> side(lo, hi);
  const double w = std::min(side(rng), image), h = std::min(side(rng), image);
  std::uniform_real_distribution<double> px(0.0, image - w), py(0.0, image - h);
  const double x = px(rng), y = py(rng);
  return {x, y, x + w, y + h};
}

}  // namespace

TEST_CASE("iou examples") {
  const Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(iou(a, Box{20, 20, 30, 30}) == 0.0);
  CHECK(iou(a, Box{10, 0, 20, 10}) == 0.0);
  CHECK(std::abs(iou(a, Box{5, 5, 15, 15}) - 1.0 / 7.0) <= 1e-9);
  CHECK(iou(a, Box{5, 5, 5, 15}) == 0.0);
}

TEST_CASE("iou is symmetric and matches the reference") {
  auto rng = make_rng(1, 0);
  for (int t = 0; t < 2000; ++t) {
    const Box a = random_box(rng, 1, 120, 256), b = random_box(rng, 1, 120, 256);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(iou(a, b) - ref_iou(a, b)) <= 1e-12);
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("generate_anchors examples") {
  const AnchorSet set = generate_anchors(256);
  REQUIRE(set.levels.size() == 5);
  CHECK(set.levels[0].count() == 32 * 32 * 9);
  CHECK(set.levels[0].grid_w == 32);
  CHECK(set.levels[4].count() == 2 * 2 * 9);
  std::size_t total = 0;
  for (const auto& l : set.levels) {
    CHECK(l.offset == total);
    total += l.count();
  }
  CHECK(set.size() == total);

  AnchorConfig c;
  c.strides = {16};
  c.base_sizes = {32};
  c.ratios = {1.0, 2.0};
  c.scales = {1.0};
  const AnchorSet one = generate_anchors(64, c);
  CHECK(one.boxes[0].width() == doctest::Approx(32.0));
  CHECK(one.boxes[0].height() == doctest::Approx(32.0));
  CHECK(one.boxes[0].cx() == doctest::Approx(8.0));
  CHECK(one.boxes[1].width() == doctest::Approx(45.2548).epsilon(1e-6));
  CHECK(one.boxes[1].height() == doctest::Approx(22.6274).epsilon(1e-6));
  CHECK(one.boxes[1].area() == doctest::Approx(1024.0).epsilon(1e-12));
  // Not clipped.
  CHECK(one.boxes[0].x1 < 0.0);

  CHECK_THROWS_AS(generate_anchors(200), InvalidArgument);
}

TEST_CASE("generate_anchors follows the reference layout and ordering") {
  for (const AnchorConfig& c : {AnchorConfig{}, unhalved(AnchorConfig{})}) {
    const AnchorSet set = generate_anchors(256, c);
    const std::vector<Box> ref = reference_anchors(256, c);
    REQUIRE(set.size() == ref.size());
    for (std::size_t a = 0; a < ref.size(); ++a) {
      CHECK(std::abs(set.boxes[a].x1 - ref[a].x1) <= 1e-9);
      CHECK(std::abs(set.boxes[a].y2 - ref[a].y2) <= 1e-9);
      const AnchorInfo& info = set.info[a];
      const AnchorLevel& level = set.levels[info.level];
      CHECK(a == level.offset + info.cell * 9 + info.ratio * 3 + info.scale);
      const double side = c.base_sizes[info.level] * c.scales[info.scale];
      CHECK(std::abs(set.boxes[a].area() - side * side) <= 1e-6);
    }
  }
  CHECK(unhalved(AnchorConfig{}).base_sizes == std::vector<double>{32, 64, 128, 256, 512});
}

TEST_CASE("encode/decode examples") {
  const Box anchor = box_from_center(50, 50, 20, 40);
  const BoxDelta d = encode_box(anchor, box_from_center(55, 50, 40, 40));
  CHECK(d[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(d[1] == 0.0);
  CHECK(d[2] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(d[3] == doctest::Approx(0.0));

  const BoxDelta zero = encode_box(anchor, anchor);
  for (double v : zero) CHECK(v == doctest::Approx(0.0));
  const Box back = decode_box(anchor, {0, 0, 0, 0}, 256);
  CHECK(back.x1 == doctest::Approx(anchor.x1));
  CHECK(back.y2 == doctest::Approx(anchor.y2));
  CHECK(decode_box(box_from_center(2, 2, 10, 10), {0, 0, 0, 0}, 256).x1 == 0.0);

  const Box huge = decode_box(anchor, {0, 0, 20, 20}, 1e9);
  CHECK(std::isfinite(huge.width()));
  CHECK(huge.x2 == doctest::Approx(50.0 + 20 * 1000 / 2.0));
  CHECK(huge.y2 == doctest::Approx(50.0 + 40 * 1000 / 2.0));
  CHECK(decode_box(anchor, {0, 0, 20, 20}, 256) == Box{0, 0, 256, 256});
}

TEST_CASE("decode inverts encode") {
  auto rng = make_rng(2, 0);
  for (int t = 0; t < 2000; ++t) {
    const Box a = random_box(rng, 2, 200, 512), g = random_box(rng, 2, 200, 512);
    const Box r = decode_box(a, encode_box(a, g), 512);
    CHECK(std::abs(r.x1 - g.x1) <= 1e-9);
    CHECK(std::abs(r.y1 - g.y1) <= 1e-9);
    CHECK(std::abs(r.x2 - g.x2) <= 1e-9);
    CHECK(std::abs(r.y2 - g.y2) <= 1e-9);
  }
}

TEST_CASE("match_anchors examples") {
  const AnchorSet set = generate_anchors(128);
  const Box exact = set.boxes[1234];
  const MatchResult m = match_anchors(set, {exact});
  CHECK(m.status[1234] == AnchorStatus::kPositive);
  CHECK(m.gt_index[1234] == 0);
  CHECK(m.max_iou[1234] == doctest::Approx(1.0));
  CHECK(m.best_anchor[0] == 1234);

  const MatchResult empty = match_anchors(set, {});
  CHECK(empty.num_positive() == 0);
  for (auto s : empty.status) CHECK(s == AnchorStatus::kNegative);

  CHECK_THROWS_AS(match_anchors(set, {exact}, MatchOptions{0.4, 0.5, true}), InvalidArgument);
  CHECK_THROWS_AS(match_anchors(set, {exact}, MatchOptions{1.5, 0.4, true}), InvalidArgument);
}

TEST_CASE("force match promotes a gt whose best IoU is 0.45") {
  AnchorConfig c;
  c.strides = {16};
  c.base_sizes = {16};
  c.ratios = {1.0};
  c.scales = {1.0};
  const AnchorSet set = generate_anchors(64, c);
  // Concentric with the anchor at (24, 24); area ratio 0.45.
  const Box gt = box_from_center(24, 24, 16 / std::sqrt(0.45), 16 / std::sqrt(0.45));
  const std::size_t target = 1 * 4 + 1;
  for (std::size_t a = 0; a < set.size(); ++a) {
    if (a != target) CHECK(ref_iou(set.boxes[a], gt) < 0.4);
  }
  CHECK(ref_iou(set.boxes[target], gt) == doctest::Approx(0.45).epsilon(1e-12));

  const MatchResult forced = match_anchors(set, {gt});
  CHECK(forced.num_positive() == 1);
  CHECK(forced.status[target] == AnchorStatus::kPositive);
  const MatchResult plain = match_anchors(set, {gt}, MatchOptions{0.5, 0.4, false});
  CHECK(plain.num_positive() == 0);
  CHECK(plain.status[target] == AnchorStatus::kIgnored);
}

TEST_CASE("match_anchors agrees with a brute-force scan") {
  const AnchorSet set = generate_anchors(128);
  auto rng = make_rng(3, 0);
  std::uniform_int_distribution<int> count(1, 4);
  for (int t = 0; t < 40; ++t) {
    std::vector<Box> gts;
    const int n = count(rng);
    for (int k = 0; k < n; ++k) gts.push_back(random_box(rng, 3, 100, 128));
    const bool force = t % 2 == 0;
    const MatchResult m = match_anchors(set, gts, MatchOptions{0.5, 0.4, force});

    std::vector<std::size_t> best(gts.size(), 0);
    std::vector<double> best_v(gts.size(), -1.0);
    std::vector<AnchorStatus> status(set.size());
    std::vector<int> owner(set.size(), -1);
    for (std::size_t a = 0; a < set.size(); ++a) {
      double v = -1.0;
      int arg = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double u = ref_iou(set.boxes[a], gts[g]);
        if (u > v) v = u, arg = int(g);
        if (u > best_v[g]) best_v[g] = u, best[g] = a;
      }
      status[a] = v >= 0.5 ? AnchorStatus::kPositive : v >= 0.4 ? AnchorStatus::kIgnored : AnchorStatus::kNegative;
      if (v >= 0.5) owner[a] = arg;
    }
    if (force) {
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (status[best[g]] != AnchorStatus::kPositive) status[best[g]] = AnchorStatus::kPositive, owner[best[g]] = int(g);
      }
    }
    CAPTURE(t);
    for (std::size_t a = 0; a < set.size(); ++a) {
      CHECK(m.status[a] == status[a]);
      CHECK(m.gt_index[a] == owner[a]);
    }
    CHECK(m.best_anchor == best);
    if (force) {
      for (std::size_t g = 0; g < gts.size(); ++g) CHECK(m.status[best[g]] == AnchorStatus::kPositive);
    }
  }
}

TEST_CASE("force match gives every single gt a positive anchor") {
  const AnchorSet set = generate_anchors(256);
  auto rng = make_rng(4, 0);
  for (int t = 0; t < 200; ++t) {
    const MatchResult m = match_anchors(set, {random_box(rng, 3, 300, 256)});
    CHECK(m.num_positive() >= 1);
  }
}
