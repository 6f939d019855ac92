#include "reldet/detection.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace reldet {

using nlohmann::json;

std::vector<Detection> score_features(int scene_id, const std::vector<Box>& proposals,
                                      const std::vector<double>& feats, int dim,
                                      const std::vector<LinearSvm>& svms) {
  if (feats.size() != proposals.size() * size_t(dim))
    throw std::invalid_argument("score_features: feature matrix size mismatch");
  std::vector<Detection> dets;
  dets.reserve(proposals.size() * (svms.size() - 1));
  for (size_t i = 0; i < proposals.size(); ++i) {
    const double* x = feats.data() + i * dim;
    for (size_t c = 1; c < svms.size(); ++c) {
      if (!svms[c].present) continue;
      Detection d;
      d.scene_id = scene_id;
      d.box = proposals[i];
      d.class_id = int(c);
      d.score = svms[c].score(x, dim);
      dets.push_back(d);
    }
  }
  return dets;
}

std::vector<Detection> score_proposals(const Scene& scene, const std::vector<Box>& proposals,
                                       BranchSet& branches, const std::vector<LinearSvm>& svms) {
  if (branches.nets.empty())
    throw std::runtime_error("score_proposals: branch checkpoints are not loaded");
  const std::vector<double> feats =
      extract_scene_features(scene.image, proposals, branches);
  return score_features(scene.id, proposals, feats, branches.feature_dim(), svms);
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(dets[idx].box, k.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

void refine_detections(std::vector<Detection>& dets, const std::vector<int>& proposal_of_det,
                       const std::vector<double>& feats, int dim,
                       const std::vector<BBoxRegressor>& regressors) {
  if (dets.size() != proposal_of_det.size())
    throw std::invalid_argument("refine_detections: index map size mismatch");
  for (size_t i = 0; i < dets.size(); ++i) {
    Detection& d = dets[i];
    if (d.class_id >= int(regressors.size()) || !regressors[d.class_id].present) continue;
    const double* x = feats.data() + size_t(proposal_of_det[i]) * dim;
    d.box = apply_rel_loc(d.box, regressors[d.class_id].predict(x));
  }
}

void save_detections_jsonl(const std::vector<Detection>& dets, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_detections_jsonl: cannot open " + path);
  for (const Detection& d : dets) {
    json j{{"scene", d.scene_id},
           {"box", {d.box.x, d.box.y, d.box.w, d.box.h}},
           {"class_id", d.class_id},
           {"score", d.score}};
    f << j.dump() << "\n";
  }
}

std::vector<Detection> load_detections_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_detections_jsonl: cannot open " + path);
  std::vector<Detection> dets;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Detection d;
    d.scene_id = j.at("scene").get<int>();
    const auto& b = j.at("box");
    d.box = Box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>());
    d.class_id = j.at("class_id").get<int>();
    d.score = j.at("score").get<double>();
    dets.push_back(d);
  }
  return dets;
}

}  // namespace reldet
