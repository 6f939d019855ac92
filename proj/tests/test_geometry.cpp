#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "reldet/box.hpp"
#include "reldet/image.hpp"
#include "reldet/rng.hpp"

using namespace reldet;

namespace {

// Independent corner-form IoU oracle: everything computed from explicit
// (x1,y1,x2,y2) tuples.
double iou_oracle(const Box& a, const Box& b) {
  const double ax1 = a.x - a.w / 2, ay1 = a.y - a.h / 2, ax2 = a.x + a.w / 2, ay2 = a.y + a.h / 2;
  const double bx1 = b.x - b.w / 2, by1 = b.y - b.h / 2, bx2 = b.x + b.w / 2, by2 = b.y + b.h / 2;
  const double ix1 = std::max(ax1, bx1), iy1 = std::max(ay1, by1);
  const double ix2 = std::min(ax2, bx2), iy2 = std::min(ay2, by2);
  if (ix1 >= ix2 || iy1 >= iy2) return 0.0;
  const double inter = (ix2 - ix1) * (iy2 - iy1);
  const double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return inter / uni;
}

Box random_box(Rng& rng) {
  return Box(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(0.5, 40),
             rng.uniform(0.5, 40));
}

}  // namespace

TEST_CASE("box corner round trip") {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const Box b = random_box(rng);
    const auto c = b.corners();
    const Box back = Box::from_corners(c[0], c[1], c[2], c[3]);
    CHECK(std::abs(back.x - b.x) < 1e-9);
    CHECK(std::abs(back.y - b.y) < 1e-9);
    CHECK(std::abs(back.w - b.w) < 1e-9);
    CHECK(std::abs(back.h - b.h) < 1e-9);
  }
}

TEST_CASE("iou basics") {
  const Box b(5, 5, 10, 10);
  CHECK(iou(b, b) == doctest::Approx(1.0));
  CHECK(iou(Box(0, 0, 4, 4), Box(100, 100, 4, 4)) == 0.0);
  // Corner forms (0,0,10,10) and (5,0,15,10): intersection 50, union 150.
  CHECK(iou(Box(5, 5, 10, 10), Box(10, 5, 10, 10)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou matches corner-form oracle and is symmetric") {
  Rng rng(11);
  for (int i = 0; i < 5000; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    if (i % 3 == 0) b = Box(a.x + rng.uniform(-5, 5), a.y + rng.uniform(-5, 5), a.w, a.h);
    CHECK(std::abs(iou(a, b) - iou_oracle(a, b)) <= 1e-12);
    CHECK(iou(a, b) == iou(b, a));
  }
}

TEST_CASE("rel_loc formula") {
  const Box b(3, 4, 5, 6);
  const RelLoc self = rel_loc(b, b);
  CHECK(self.dx == 0.0);
  CHECK(self.dy == 0.0);
  CHECK(self.dw == 0.0);
  CHECK(self.dh == 0.0);

  const RelLoc r1 = rel_loc(Box(12, 10, 20, 20), Box(10, 10, 10, 20));
  CHECK(r1.dx == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r1.dy == doctest::Approx(0.0));
  CHECK(r1.dw == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(r1.dh == doctest::Approx(0.0));

  const RelLoc r2 = rel_loc(Box(10, 14, 20, 10), Box(10, 10, 20, 20));
  CHECK(r2.dx == doctest::Approx(0.0));
  CHECK(r2.dy == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(r2.dw == doctest::Approx(0.0));
  CHECK(r2.dh == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("apply_rel_loc inverts rel_loc") {
  const Box c(12, 10, 20, 20);
  const Box id = apply_rel_loc(c, RelLoc());
  CHECK(id.x == c.x);
  CHECK(id.y == c.y);
  CHECK(id.w == c.w);
  CHECK(id.h == c.h);

  const Box g = apply_rel_loc(c, RelLoc(0.1, 0.0, std::log(2.0), 0.0));
  CHECK(g.x == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(g.y == doctest::Approx(10.0));
  CHECK(g.w == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(g.h == doctest::Approx(20.0));

  Rng rng(23);
  for (int i = 0; i < 10000; ++i) {
    const Box cand = random_box(rng), gt = random_box(rng);
    const Box back = apply_rel_loc(cand, rel_loc(cand, gt));
    CHECK(std::abs(back.x - gt.x) < 1e-9);
    CHECK(std::abs(back.y - gt.y) < 1e-9);
    CHECK(std::abs(back.w - gt.w) < 1e-9);
    CHECK(std::abs(back.h - gt.h) < 1e-9);
  }
}

TEST_CASE("crop_region scales about the window center") {
  const Box w(50, 50, 20, 20);
  const Box r1 = crop_region(w, {0.0, 1.0});
  CHECK(r1.x == 50.0);
  CHECK(r1.w == 20.0);
  const Box r2 = crop_region(w, {0.0, 2.7});
  CHECK(r2.x == 50.0);
  CHECK(r2.y == 50.0);
  CHECK(r2.w == doctest::Approx(54.0));
  CHECK(r2.h == doctest::Approx(54.0));
  const Box r3 = crop_region(w, {0.0, 0.8});
  CHECK(r3.w == doctest::Approx(16.0));
  CHECK(r3.h == doctest::Approx(16.0));
}

TEST_CASE("coverage_fraction") {
  CHECK(coverage_fraction(Box(5, 5, 10, 10), Box(5, 5, 10, 10), 1.0) == doctest::Approx(1.0));
  CHECK(coverage_fraction(Box(5, 5, 10, 10), Box(5, 5, 10, 10), 2.0) == doctest::Approx(1.0));
  CHECK(coverage_fraction(Box(5, 5, 10, 10), Box(15, 5, 10, 10), 1.0) == 0.0);
  // Crop (5,5,27,27) contains gt corner form (5,0,15,10) entirely.
  CHECK(coverage_fraction(Box(5, 5, 10, 10), Box(10, 5, 10, 10), 2.7) == doctest::Approx(1.0));
}

TEST_CASE("coverage_fraction monotone in scale") {
  Rng rng(31);
  for (int i = 0; i < 2000; ++i) {
    const Box w = random_box(rng), g = random_box(rng);
    double prev = coverage_fraction(w, g, 0.4);
    for (double s : {0.8, 1.2, 1.8, 2.7, 4.0}) {
      const double cur = coverage_fraction(w, g, s);
      CHECK(cur >= prev - 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("coverage search at scale 2.7 (reduced sweep)") {
  // Constrained pairs: iou >= 0.37, aspect ratios in [1/3, 3].
  Rng rng(41);
  int tested = 0, violations = 0;
  while (tested < 100000) {
    const double aw = rng.uniform(4, 40);
    const double ah = aw * std::exp(rng.uniform(-std::log(3.0), std::log(3.0)));
    const Box w(0, 0, aw, ah);
    const double gw = aw * std::exp(rng.uniform(-0.8, 0.8));
    const double gh = ah * std::exp(rng.uniform(-0.8, 0.8));
    const Box g(rng.uniform(-0.6, 0.6) * aw, rng.uniform(-0.6, 0.6) * ah, gw, gh);
    const double ar = gw / gh;
    if (ar < 1.0 / 3.0 || ar > 3.0) continue;
    if (iou(w, g) < 0.37) continue;
    ++tested;
    if (coverage_fraction(w, g, 2.7) <= 0.5) {
      ++violations;
      MESSAGE("violation: w=(" << w.x << "," << w.y << "," << w.w << "," << w.h << ") g=(" << g.x
                               << "," << g.y << "," << g.w << "," << g.h << ")");
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("sample_crop identity") {
  Rng rng(53);
  Image scene(32, 32);
  for (double& v : scene.data) v = rng.uniform();
  // Window aligned to the pixel grid: corner (4,6), size 16x16.
  const Box w(4 + 8.0, 6 + 8.0, 16, 16);
  const Image crop = sample_crop(scene, w, {0.0, 1.0}, 16);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) CHECK(crop.at(r, c) == doctest::Approx(scene.at(6 + r, 4 + c)));
}

TEST_CASE("sample_crop rejects tiny outputs") {
  Image scene(16, 16, 0.5);
  CHECK_THROWS_AS(sample_crop(scene, Box(8, 8, 8, 8), {0.0, 1.0}, 7), std::invalid_argument);
}

TEST_CASE("two 90-degree crops compose to one 180-degree crop") {
  Rng rng(59);
  Image scene(64, 64);
  // Smooth-ish pattern keeps interpolation error small.
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c)
      scene.at(r, c) = 0.5 + 0.3 * std::sin(0.2 * r) * std::cos(0.17 * c) + 0.05 * rng.uniform();
  const Box w(32, 32, 24, 24);

  const Image once = sample_crop(scene, w, {90.0, 1.0}, 24);
  const Box full(12, 12, 24, 24);
  const Image twice = sample_crop(once, full, {90.0, 1.0}, 24);
  const Image direct = sample_crop(scene, w, {180.0, 1.0}, 24);

  double mae = 0.0;
  for (size_t i = 0; i < direct.data.size(); ++i) mae += std::abs(twice.data[i] - direct.data[i]);
  mae /= double(direct.data.size());
  CHECK(mae < 1e-3);
}

TEST_CASE("sample_crop constant-field invariance") {
  Image scene(48, 48, 0.37);
  for (const CropSpec& spec : detection_crop_specs()) {
    const Image crop = sample_crop(scene, Box(20, 25, 14, 9), spec, 32);
    for (double v : crop.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  }
}
