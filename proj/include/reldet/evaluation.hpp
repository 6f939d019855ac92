#pragma once

#include <map>
#include <string>
#include <vector>

#include "reldet/detection.hpp"

namespace reldet {

// Ground-truth boxes of one class, keyed by scene id.
using ClassGts = std::map<int, std::vector<Box>>;

struct PrCurve {
  std::vector<double> recall;     // one point per detection, score-descending
  std::vector<double> precision;
};

// PASCAL all-point interpolated AP. A detection is a true positive iff it
// has IoU >= 0.5 with a not-yet-matched ground truth of its class; matching
// is greedy in score order. No ground truths and no detections gives 0.
double average_precision(const std::vector<Detection>& dets, const ClassGts& gts,
                         double iou_thresh = 0.5, PrCurve* curve = nullptr);

struct EvalResult {
  std::vector<int> class_ids;
  std::vector<double> ap;         // parallel to class_ids
  std::vector<PrCurve> curves;
  double map = 0.0;
  double median_ap = 0.0;
};

EvalResult evaluate_detections(const std::vector<Detection>& dets, const Dataset& test_set,
                               double iou_thresh = 0.5);

// ap.csv, pr_<class>.csv for each class, and pr_<class>.svg plots.
void write_eval_artifacts(const EvalResult& res, const std::string& out_dir);

void write_pr_svg(const PrCurve& curve, const std::string& title, const std::string& path);

}  // namespace reldet
