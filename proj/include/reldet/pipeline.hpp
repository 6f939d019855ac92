#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "reldet/bbox_regressor.hpp"
#include "reldet/config.hpp"
#include "reldet/detection.hpp"
#include "reldet/evaluation.hpp"
#include "reldet/features.hpp"
#include "reldet/labeling.hpp"

namespace reldet {

enum class Stage { a_pretrain, b_window_object, c_multi_object, d_finetune, svm };

enum class InitFrom { none, stage_a, stage_b, stage_c, random };

struct StagePlan {
  Stage stage = Stage::a_pretrain;
  InitFrom init_from = InitFrom::none;  // none = the stage's natural prerequisite
  std::vector<CropSpec> crop_specs;
  int iterations = -1;  // -1 = the config default for this stage
  double lr = -1.0;
  std::string init_dir;  // where prerequisite checkpoints live; "" = the run dir
};

// Standard artifact names inside a run directory.
struct RunPaths {
  std::string run_dir;

  std::string clusters() const;
  std::string labels(bool clustered = true) const;
  std::string branch_ckpt(const std::string& stage, const CropSpec& spec) const;
  std::string joint_head() const;
  std::string features_bin() const;
  std::string features_meta() const;
  std::string svms() const;
  std::string bbox() const;
  std::string detections() const;
  std::string eval_dir() const;
};

struct ClusterArtifacts {
  WindowObjectClusters wo;
  ClusterModel layout;
};

// Fit window-object and layout clusters from a dataset; writes clusters().
// `use_clustering = false` builds the single-regressor-per-class variant
// (one mean exemplar per class) used by the no-cluster ablation.
ClusterArtifacts run_cluster(const RunConfig& cfg, const Dataset& train,
                             const RunPaths& paths, bool use_clustering = true);

ClusterArtifacts load_cluster_artifacts(const std::string& path);

LabeledDataset run_make_labels(const RunConfig& cfg, const Dataset& train,
                               const ClusterArtifacts& clusters, const RunPaths& paths,
                               bool clustered_name = true);

// Train one stage for every branch in the plan; returns checkpoint paths.
// Prerequisite checkpoints are resolved from the run dir and their absence
// is a PrereqError. Stage d also writes the joint head.
std::vector<std::string> run_stage(const RunConfig& cfg, const StagePlan& plan,
                                   const Dataset& train, const LabeledDataset* labels,
                                   const RunPaths& paths);

// Load the stage-d feature extractors (falls back over c/b/a is not done:
// detection always consumes stage-d checkpoints).
BranchSet load_stage_branches(const RunPaths& paths, const std::string& stage,
                              const std::vector<CropSpec>& specs);

struct FeatureExtraction {
  // Selected candidate metadata, parallel to feature rows.
  struct Row {
    int scene_id;
    Box box;
    int class_id;
    bool is_gt;
    RelLoc loc_target;
    std::vector<double> iou_per_class;  // max IoU vs gts of each class, index 1..C
  };
  std::vector<Row> rows;
  std::vector<double> features;  // (n, dim) row-major
  int dim = 0;
};

FeatureExtraction run_extract_features(const RunConfig& cfg, const Dataset& train,
                                       const LabeledDataset& labels, BranchSet& branches,
                                       const RunPaths& paths);

void save_feature_extraction(const FeatureExtraction& fx, const RunPaths& paths);
FeatureExtraction load_feature_extraction(const RunPaths& paths);

// Per-class linear SVMs (RCNN convention: positives are ground-truth boxes,
// negatives have IoU < 0.3 with every gt of the class).
std::vector<LinearSvm> run_train_svms(const RunConfig& cfg, const FeatureExtraction& fx,
                                      const RunPaths& paths);
std::vector<LinearSvm> load_svms(const RunPaths& paths);

std::vector<BBoxRegressor> run_train_bbox(const RunConfig& cfg, const FeatureExtraction& fx,
                                          const RunPaths& paths);
std::vector<BBoxRegressor> load_bbox(const RunPaths& paths);

std::vector<Detection> run_detect(const RunConfig& cfg, const Dataset& test, BranchSet& branches,
                                  const std::vector<LinearSvm>& svms,
                                  const std::vector<BBoxRegressor>* regressors,
                                  const RunPaths& paths);

EvalResult run_eval(const RunConfig& cfg, const Dataset& test,
                    const std::vector<Detection>& dets, const RunPaths& paths);

// Derived per-purpose seeds, all reproducible from the master seed.
uint64_t derive_seed(uint64_t master, const std::string& purpose);

}  // namespace reldet
