#pragma once

#include <vector>

#include "json.hpp"
#include "reldet/box.hpp"

namespace reldet {

// Per-class ridge regression from features to a RelLoc correction.
struct BBoxRegressor {
  bool present = false;
  int dim = 0;                    // feature dimension (bias handled internally)
  std::vector<double> weights;    // (dim + 1) x 4, row-major, last row = bias
  double ridge_used = 0.0;

  RelLoc predict(const double* x) const;
};

// Closed-form normal equations (X^T X + ridge I) W = X^T Y with a constant
// column appended to X. A singular/non-finite solve retries with the ridge
// scaled up by 10, warning on stderr.
BBoxRegressor train_bbox_regressor(const std::vector<double>& xs, int n, int dim,
                                   const std::vector<RelLoc>& targets, double ridge = 1e-6);

nlohmann::json bbox_regressor_to_json(const BBoxRegressor& r);
BBoxRegressor bbox_regressor_from_json(const nlohmann::json& j);

}  // namespace reldet
