#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace reldet {

struct SvmTrainConfig {
  double reg = 1e-3;   // L2 coefficient on w (bias unregularized)
  int epochs = 400;    // full-batch subgradient iterations
  double lr0 = 1.0;
  double lr_decay = 0.02;  // step t uses lr0 / (1 + lr_decay * t)
  bool standardize = true;
};

// Linear SVM with optional per-dimension input standardization folded into
// the model so scoring needs no side information.
struct LinearSvm {
  bool present = false;  // false when the class had no positives
  std::vector<double> w;
  double b = 0.0;
  std::vector<double> mean;   // empty when standardization is off
  std::vector<double> scale;

  double score(const double* x, int dim) const;
};

// Full-batch deterministic subgradient descent on
//   reg/2 * ||w||^2 + mean_i hinge(1 - y_i * (w.x_i + b)).
// Full-batch averaging makes the solution invariant to duplicating the
// training set.
LinearSvm train_svm(const std::vector<double>& xs, int n, int dim, const std::vector<int>& ys,
                    const SvmTrainConfig& cfg);

nlohmann::json svm_to_json(const LinearSvm& m);
LinearSvm svm_from_json(const nlohmann::json& j);

}  // namespace reldet
