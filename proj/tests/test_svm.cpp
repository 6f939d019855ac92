#include <cmath>

#include "doctest.h"
#include "reldet/bbox_regressor.hpp"
#include "reldet/rng.hpp"
#include "reldet/svm.hpp"

using namespace reldet;

namespace {

// 2D dataset with a known separating direction.
struct ToyData {
  std::vector<double> xs;
  std::vector<int> ys;
  int n = 0;
};

ToyData make_toy(uint64_t seed, double angle_deg, double margin) {
  ToyData d;
  Rng rng(seed);
  const double ax = std::cos(angle_deg * M_PI / 180.0);
  const double ay = std::sin(angle_deg * M_PI / 180.0);
  for (int i = 0; i < 200; ++i) {
    const int y = i % 2 == 0 ? 1 : -1;
    const double along = rng.uniform(-2.0, 2.0);
    const double off = y * (margin + rng.uniform(0.0, 1.5));
    d.xs.push_back(along * -ay + off * ax);
    d.xs.push_back(along * ax + off * ay);
    d.ys.push_back(y);
    ++d.n;
  }
  return d;
}

double objective(const std::vector<double>& xs, const std::vector<int>& ys, int n, int dim,
                 const std::vector<double>& w, double b, double reg) {
  double obj = 0.0;
  for (int j = 0; j < dim; ++j) obj += 0.5 * reg * w[j] * w[j];
  double hinge = 0.0;
  for (int i = 0; i < n; ++i) {
    double s = b;
    for (int j = 0; j < dim; ++j) s += w[j] * xs[size_t(i) * dim + j];
    hinge += std::max(0.0, 1.0 - ys[i] * s);
  }
  return obj + hinge / n;
}

}  // namespace

TEST_CASE("svm separates a linearly separable set (hinge -> 0)") {
  const ToyData d = make_toy(1, 30.0, 0.5);
  SvmTrainConfig cfg;
  const LinearSvm m = train_svm(d.xs, d.n, 2, d.ys, cfg);
  int correct = 0;
  double hinge = 0.0;
  for (int i = 0; i < d.n; ++i) {
    const double s = m.score(&d.xs[size_t(i) * 2], 2);
    correct += (s > 0) == (d.ys[i] > 0);
    hinge += std::max(0.0, 1.0 - d.ys[i] * s);
  }
  CHECK(correct == d.n);
  CHECK(hinge / d.n < 0.05);
}

TEST_CASE("svm decision boundary matches brute-force grid search within 5 degrees") {
  const ToyData d = make_toy(7, 63.0, 0.3);
  SvmTrainConfig cfg;
  cfg.standardize = false;  // keep raw geometry for the angular comparison
  const LinearSvm m = train_svm(d.xs, d.n, 2, d.ys, cfg);

  // Grid search over unit normal angle and bias minimizing the same
  // objective; scale handled by a nested 1-D search over |w|.
  double best_obj = 1e300, best_angle = 0.0;
  for (int adeg = 0; adeg < 360; ++adeg) {
    const double ax = std::cos(adeg * M_PI / 180.0), ay = std::sin(adeg * M_PI / 180.0);
    for (double scale : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
      for (double b = -2.0; b <= 2.0; b += 0.05) {
        const std::vector<double> w = {scale * ax, scale * ay};
        const double obj = objective(d.xs, d.ys, d.n, 2, w, b, cfg.reg);
        if (obj < best_obj) {
          best_obj = obj;
          best_angle = adeg;
        }
      }
    }
  }
  const double got_angle = std::atan2(m.w[1], m.w[0]) * 180.0 / M_PI;
  double diff = std::abs(got_angle - best_angle);
  while (diff > 180.0) diff = std::abs(diff - 360.0);
  CHECK(diff <= 5.0);
  // And the trained objective is no worse than the grid's best.
  CHECK(objective(d.xs, d.ys, d.n, 2, m.w, m.b, cfg.reg) <= best_obj + 1e-6);
}

TEST_CASE("svm solution is invariant to duplicating every training point") {
  const ToyData d = make_toy(21, 120.0, 0.4);
  SvmTrainConfig cfg;
  const LinearSvm m1 = train_svm(d.xs, d.n, 2, d.ys, cfg);

  std::vector<double> xs2 = d.xs;
  xs2.insert(xs2.end(), d.xs.begin(), d.xs.end());
  std::vector<int> ys2 = d.ys;
  ys2.insert(ys2.end(), d.ys.begin(), d.ys.end());
  const LinearSvm m2 = train_svm(xs2, 2 * d.n, 2, ys2, cfg);

  for (int j = 0; j < 2; ++j) CHECK(std::abs(m1.w[j] - m2.w[j]) < 1e-6);
  CHECK(std::abs(m1.b - m2.b) < 1e-6);
}

TEST_CASE("svm json round trip") {
  const ToyData d = make_toy(4, 10.0, 0.5);
  SvmTrainConfig cfg;
  const LinearSvm m = train_svm(d.xs, d.n, 2, d.ys, cfg);
  const LinearSvm back = svm_from_json(svm_to_json(m));
  CHECK(back.present == m.present);
  CHECK(back.w == m.w);
  CHECK(back.b == m.b);
  CHECK(back.mean == m.mean);
  CHECK(back.scale == m.scale);
}

TEST_CASE("bbox regressor recovers an exact linear relation") {
  Rng rng(17);
  const int n = 60, dim = 5;
  std::vector<double> xs(size_t(n) * dim);
  std::vector<double> true_w(size_t(dim + 1) * 4);
  for (double& v : true_w) v = rng.uniform(-1, 1);
  std::vector<RelLoc> targets(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dim; ++j) xs[size_t(i) * dim + j] = rng.uniform(-2, 2);
    for (int k = 0; k < 4; ++k) {
      double v = true_w[size_t(dim) * 4 + k];
      for (int j = 0; j < dim; ++j) v += true_w[size_t(j) * 4 + k] * xs[size_t(i) * dim + j];
      targets[i][k] = v;
    }
  }
  const BBoxRegressor reg = train_bbox_regressor(xs, n, dim, targets, 1e-10);
  REQUIRE(reg.present);
  for (size_t j = 0; j < true_w.size(); ++j) CHECK(std::abs(reg.weights[j] - true_w[j]) < 1e-6);
  // Prediction on a fresh point matches the linear relation.
  std::vector<double> x(dim);
  for (double& v : x) v = rng.uniform(-2, 2);
  const RelLoc pred = reg.predict(x.data());
  for (int k = 0; k < 4; ++k) {
    double want = true_w[size_t(dim) * 4 + k];
    for (int j = 0; j < dim; ++j) want += true_w[size_t(j) * 4 + k] * x[j];
    CHECK(pred[k] == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("bbox regressor limit cases") {
  Rng rng(3);
  const int n = 30, dim = 3;
  std::vector<double> xs(size_t(n) * dim);
  for (double& v : xs) v = rng.uniform(-1, 1);

  // All-zero targets -> (near-)zero weights.
  std::vector<RelLoc> zeros(n);
  const BBoxRegressor rz = train_bbox_regressor(xs, n, dim, zeros, 1e-6);
  for (double w : rz.weights) CHECK(std::abs(w) < 1e-9);

  // Huge ridge -> weights shrink toward zero.
  std::vector<RelLoc> targets(n);
  for (auto& t : targets)
    t = RelLoc(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  const BBoxRegressor mild = train_bbox_regressor(xs, n, dim, targets, 1e-6);
  const BBoxRegressor huge = train_bbox_regressor(xs, n, dim, targets, 1e12);
  double norm_mild = 0, norm_huge = 0;
  for (double w : mild.weights) norm_mild += w * w;
  for (double w : huge.weights) norm_huge += w * w;
  CHECK(norm_huge < 1e-12);
  CHECK(norm_mild > norm_huge);

  const BBoxRegressor back = bbox_regressor_from_json(bbox_regressor_to_json(mild));
  CHECK(back.weights == mild.weights);
  CHECK(back.dim == mild.dim);
}
