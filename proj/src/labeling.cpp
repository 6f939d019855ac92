#include "reldet/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "reldet/parallel.hpp"
#include "reldet/rng.hpp"

namespace reldet {

using nlohmann::json;

std::vector<GtBox> scene_gts(const Scene& scene) {
  std::vector<GtBox> gts;
  gts.reserve(scene.objects.size());
  for (const SceneObject& o : scene.objects) gts.push_back({o.box, o.class_id});
  return gts;
}

std::optional<GtBox> match_gt(const Box& candidate, const std::vector<GtBox>& gts) {
  int best = -1;
  double best_iou = 0.0;
  for (size_t i = 0; i < gts.size(); ++i) {
    const double v = iou(candidate, gts[i].box);
    if (v > best_iou) {
      best_iou = v;
      best = int(i);
    }
  }
  if (best < 0 || best_iou < 0.5) return std::nullopt;
  return gts[best];
}

namespace {

// Index of the matched gt (same scan as match_gt, kept so the matched
// instance can be excluded from its own layout labels).
int match_gt_index(const Box& candidate, const std::vector<GtBox>& gts) {
  int best = -1;
  double best_iou = 0.0;
  for (size_t i = 0; i < gts.size(); ++i) {
    const double v = iou(candidate, gts[i].box);
    if (v > best_iou) {
      best_iou = v;
      best = int(i);
    }
  }
  return best_iou >= 0.5 ? best : -1;
}

}  // namespace

SampleLabel make_label(const Box& candidate, const std::vector<GtBox>& gts,
                       const WindowObjectClusters& wo_clusters, const ClusterModel& layout_model) {
  if (wo_clusters.models.empty() || !layout_model.fitted())
    throw std::logic_error("make_label: cluster models are not fitted");

  SampleLabel label;
  const int matched = match_gt_index(candidate, gts);
  if (matched >= 0) {
    label.class_id = gts[matched].class_id;
    label.loc_target = rel_loc(candidate, gts[matched].box);
    label.cluster_id = wo_clusters.assign_global(label.class_id, label.loc_target);
  }

  // Each surrounding gt goes to its closest layout cluster; the label of a
  // cluster is the class of its nearest assignee. The matched gt is the
  // window-object relationship, not a neighbor, so it is excluded.
  const int K = layout_model.n_clusters;
  label.layout_labels.assign(K, 0);
  std::vector<double> best_dist(K, std::numeric_limits<double>::infinity());
  for (size_t i = 0; i < gts.size(); ++i) {
    if (int(i) == matched) continue;
    const RelLoc r = rel_loc(candidate, gts[i].box);
    const int k = assign(layout_model, r);
    const double d = r.squared_distance(layout_model.exemplars[k]);
    if (d < best_dist[k]) {
      best_dist[k] = d;
      label.layout_labels[k] = gts[i].class_id;
    }
  }
  return label;
}

std::vector<Box> gen_proposals(const std::vector<Box>& scene_gts, uint64_t rng_seed,
                               const ProposalConfig& cfg, int scene_size) {
  Rng rng(rng_seed);
  std::vector<Box> out;
  out.reserve(scene_gts.size() * cfg.n_jitter + cfg.n_random);
  const double S = scene_size;
  for (const Box& gt : scene_gts) {
    for (int j = 0; j < cfg.n_jitter; ++j) {
      const double cx = gt.x + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * gt.w;
      const double cy = gt.y + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * gt.h;
      const double w = gt.w * std::exp(rng.uniform(-cfg.log_scale_jitter, cfg.log_scale_jitter));
      const double h = gt.h * std::exp(rng.uniform(-cfg.log_scale_jitter, cfg.log_scale_jitter));
      out.emplace_back(std::clamp(cx, 0.0, S), std::clamp(cy, 0.0, S), w, h);
    }
  }
  for (int j = 0; j < cfg.n_random; ++j) {
    const double w = rng.uniform(cfg.min_random_size, S / 2.0);
    const double h = rng.uniform(cfg.min_random_size, S / 2.0);
    out.emplace_back(rng.uniform(0.0, S), rng.uniform(0.0, S), w, h);
  }
  return out;
}

std::vector<Candidate> label_scene(const Scene& scene, const WindowObjectClusters& wo_clusters,
                                   const ClusterModel& layout_model, const ProposalConfig& cfg,
                                   uint64_t proposal_seed) {
  const std::vector<GtBox> gts = scene_gts(scene);
  std::vector<Box> gt_boxes;
  for (const GtBox& g : gts) gt_boxes.push_back(g.box);

  std::vector<Candidate> out;
  for (const GtBox& g : gts) {
    Candidate c;
    c.scene_id = scene.id;
    c.box = g.box;
    c.is_gt = true;
    c.label = make_label(c.box, gts, wo_clusters, layout_model);
    out.push_back(std::move(c));
  }
  for (const Box& b : gen_proposals(gt_boxes, proposal_seed, cfg, scene.size)) {
    Candidate c;
    c.scene_id = scene.id;
    c.box = b;
    c.is_gt = false;
    c.label = make_label(c.box, gts, wo_clusters, layout_model);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<uint64_t> scene_proposal_seeds(uint64_t seed, size_t n_scenes) {
  Rng base(seed);
  std::vector<uint64_t> seeds(n_scenes);
  for (size_t i = 0; i < n_scenes; ++i) seeds[i] = base.next_u64();
  return seeds;
}

LabeledDataset label_dataset(const Dataset& ds, const WindowObjectClusters& wo_clusters,
                             const ClusterModel& layout_model, const ProposalConfig& cfg,
                             uint64_t seed, int threads) {
  LabeledDataset lds;
  lds.n_classes = ds.config.n_classes;
  lds.n_clusters = wo_clusters.total_clusters();
  lds.n_layout = layout_model.n_clusters;

  const std::vector<uint64_t> scene_seeds = scene_proposal_seeds(seed, ds.scenes.size());

  std::vector<std::vector<Candidate>> per_scene(ds.scenes.size());
  parallel_for(ds.scenes.size(), threads, [&](size_t i) {
    per_scene[i] = label_scene(ds.scenes[i], wo_clusters, layout_model, cfg, scene_seeds[i]);
  });
  for (auto& v : per_scene)
    for (auto& c : v) lds.candidates.push_back(std::move(c));
  return lds;
}

void save_labels_jsonl(const LabeledDataset& lds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_labels_jsonl: cannot open " + path);
  json header{{"format", "reldet-labels"},
              {"n_classes", lds.n_classes},
              {"n_clusters", lds.n_clusters},
              {"n_layout", lds.n_layout}};
  f << header.dump() << "\n";
  for (const Candidate& c : lds.candidates) {
    json j{{"scene", c.scene_id},
           {"box", {c.box.x, c.box.y, c.box.w, c.box.h}},
           {"is_gt", c.is_gt},
           {"class_id", c.label.class_id},
           {"cluster_id", c.label.cluster_id},
           {"loc_target",
            {c.label.loc_target.dx, c.label.loc_target.dy, c.label.loc_target.dw,
             c.label.loc_target.dh}},
           {"layout_labels", c.label.layout_labels}};
    f << j.dump() << "\n";
  }
}

LabeledDataset load_labels_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_labels_jsonl: cannot open " + path);
  LabeledDataset lds;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("load_labels_jsonl: empty file " + path);
  json header = json::parse(line);
  if (header.value("format", "") != "reldet-labels")
    throw std::runtime_error("load_labels_jsonl: bad header in " + path);
  lds.n_classes = header.at("n_classes").get<int>();
  lds.n_clusters = header.at("n_clusters").get<int>();
  lds.n_layout = header.at("n_layout").get<int>();
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Candidate c;
    c.scene_id = j.at("scene").get<int>();
    const auto& b = j.at("box");
    c.box = Box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>());
    c.is_gt = j.at("is_gt").get<bool>();
    c.label.class_id = j.at("class_id").get<int>();
    c.label.cluster_id = j.at("cluster_id").get<int>();
    const auto& t = j.at("loc_target");
    c.label.loc_target = RelLoc(t[0].get<double>(), t[1].get<double>(), t[2].get<double>(),
                                t[3].get<double>());
    c.label.layout_labels = j.at("layout_labels").get<std::vector<int>>();
    lds.candidates.push_back(std::move(c));
  }
  return lds;
}

}  // namespace reldet
