#pragma once

#include <map>
#include <string>
#include <vector>

#include "reldet/bbox_regressor.hpp"
#include "reldet/features.hpp"
#include "reldet/svm.hpp"
#include "reldet/synthdata.hpp"

namespace reldet {

struct Detection {
  int scene_id = 0;
  Box box;
  int class_id = 0;  // in [1, C]
  double score = 0.0;
};

// Score pre-extracted features: one Detection per class per proposal.
// svms is indexed by class id (entry 0 unused).
std::vector<Detection> score_features(int scene_id, const std::vector<Box>& proposals,
                                      const std::vector<double>& feats, int dim,
                                      const std::vector<LinearSvm>& svms);

// Convenience path building the six crops and extracting features itself.
std::vector<Detection> score_proposals(const Scene& scene, const std::vector<Box>& proposals,
                                       BranchSet& branches, const std::vector<LinearSvm>& svms);

// Greedy NMS over one class: keep the highest score, drop boxes with
// IoU > iou_thresh against any kept box. Score ties keep input order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

// Apply per-class bbox regression to each detection's box; scores and the
// detection count never change. proposal_of_det maps detections to feature
// rows. Regressors indexed by class id (entry 0 unused).
void refine_detections(std::vector<Detection>& dets, const std::vector<int>& proposal_of_det,
                       const std::vector<double>& feats, int dim,
                       const std::vector<BBoxRegressor>& regressors);

void save_detections_jsonl(const std::vector<Detection>& dets, const std::string& path);
std::vector<Detection> load_detections_jsonl(const std::string& path);

}  // namespace reldet
