#include "reldet/bbox_regressor.hpp"

#include <Eigen/Dense>
#include <cstdio>
#include <stdexcept>

namespace reldet {

using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RelLoc BBoxRegressor::predict(const double* x) const {
  RelLoc out;
  for (int k = 0; k < 4; ++k) {
    double v = weights[size_t(dim) * 4 + k];  // bias row
    for (int j = 0; j < dim; ++j) v += weights[size_t(j) * 4 + k] * x[j];
    out[k] = v;
  }
  return out;
}

BBoxRegressor train_bbox_regressor(const std::vector<double>& xs, int n, int dim,
                                   const std::vector<RelLoc>& targets, double ridge) {
  if (n <= 0 || dim <= 0 || xs.size() != size_t(n) * dim || int(targets.size()) != n)
    throw std::invalid_argument("train_bbox_regressor: inconsistent input sizes");

  RowMat X(n, dim + 1);
  X.leftCols(dim) = Eigen::Map<const RowMat>(xs.data(), n, dim);
  X.col(dim).setOnes();
  RowMat Y(n, 4);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 4; ++k) Y(i, k) = targets[i][k];

  const Eigen::MatrixXd xtx = X.transpose() * X;
  const Eigen::MatrixXd xty = X.transpose() * Y;

  BBoxRegressor reg;
  reg.dim = dim;
  double rho = ridge;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::MatrixXd A = xtx;
    A.diagonal().array() += rho;
    Eigen::MatrixXd W = A.ldlt().solve(xty);
    if (W.allFinite()) {
      reg.present = true;
      reg.ridge_used = rho;
      reg.weights.resize(size_t(dim + 1) * 4);
      for (int j = 0; j <= dim; ++j)
        for (int k = 0; k < 4; ++k) reg.weights[size_t(j) * 4 + k] = W(j, k);
      return reg;
    }
    rho *= 10.0;
    std::fprintf(stderr, "train_bbox_regressor: singular system, raising ridge to %g\n", rho);
  }
  throw std::runtime_error("train_bbox_regressor: system stayed singular");
}

json bbox_regressor_to_json(const BBoxRegressor& r) {
  return json{{"present", r.present},
              {"dim", r.dim},
              {"weights", r.weights},
              {"ridge_used", r.ridge_used}};
}

BBoxRegressor bbox_regressor_from_json(const json& j) {
  BBoxRegressor r;
  r.present = j.at("present").get<bool>();
  r.dim = j.at("dim").get<int>();
  r.weights = j.at("weights").get<std::vector<double>>();
  r.ridge_used = j.at("ridge_used").get<double>();
  return r;
}

}  // namespace reldet
