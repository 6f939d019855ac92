#pragma once

#include <optional>
#include <string>
#include <vector>

#include "reldet/box.hpp"
#include "reldet/clustering.hpp"
#include "reldet/synthdata.hpp"

namespace reldet {

// Complete supervision bundle for one candidate window.
struct SampleLabel {
  int class_id = 0;    // 0 = background
  int cluster_id = 0;  // 0 = background, else global window-object cluster id
  RelLoc loc_target;   // defined only when class_id > 0
  std::vector<int> layout_labels;  // K entries, each in [0, C], 0 = no object
};

struct Candidate {
  int scene_id = 0;
  Box box;
  bool is_gt = false;
  SampleLabel label;
};

struct LabeledDataset {
  std::vector<Candidate> candidates;
  int n_classes = 0;
  int n_clusters = 0;  // N: total window-object clusters
  int n_layout = 0;    // K: layout clusters
};

struct GtBox {
  Box box;
  int class_id = 0;
};

// Ground truth with maximum IoU if that IoU >= 0.5; ties keep the earliest.
std::optional<GtBox> match_gt(const Box& candidate, const std::vector<GtBox>& gts);

SampleLabel make_label(const Box& candidate, const std::vector<GtBox>& gts,
                       const WindowObjectClusters& wo_clusters, const ClusterModel& layout_model);

struct ProposalConfig {
  int n_jitter = 8;
  int n_random = 8;
  double center_jitter = 0.38;         // offsets uniform in +-center_jitter * size
  double log_scale_jitter = 0.47000362924573563;  // ln(1.6)
  double min_random_size = 8.0;
};

// Jittered boxes around each ground truth plus uniform random boxes.
// Centers are clipped into the scene; deterministic for a fixed seed.
std::vector<Box> gen_proposals(const std::vector<Box>& scene_gts, uint64_t rng_seed,
                               const ProposalConfig& cfg, int scene_size);

// Per-scene proposal seeds. Clustering and labeling both derive candidate
// sets from these, so they always see identical proposals.
std::vector<uint64_t> scene_proposal_seeds(uint64_t seed, size_t n_scenes);

// Candidates for one scene: ground-truth boxes first, then proposals,
// all labeled against the fitted cluster models.
std::vector<Candidate> label_scene(const Scene& scene, const WindowObjectClusters& wo_clusters,
                                   const ClusterModel& layout_model, const ProposalConfig& cfg,
                                   uint64_t proposal_seed);

LabeledDataset label_dataset(const Dataset& ds, const WindowObjectClusters& wo_clusters,
                             const ClusterModel& layout_model, const ProposalConfig& cfg,
                             uint64_t seed, int threads = 1);

void save_labels_jsonl(const LabeledDataset& lds, const std::string& path);
LabeledDataset load_labels_jsonl(const std::string& path);

std::vector<GtBox> scene_gts(const Scene& scene);

}  // namespace reldet
