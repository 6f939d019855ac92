#pragma once

#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "reldet/box.hpp"

namespace reldet {

enum class ClusterKind { window_object, layout };

std::string to_string(ClusterKind kind);
ClusterKind cluster_kind_from_string(const std::string& s);

struct ClusterStats {
  std::vector<int> counts;
  std::vector<RelLoc> means;
  std::vector<double> mean_distances;  // mean Euclidean distance to the exemplar
};

// Exemplar-based cluster model produced by affinity propagation.
struct ClusterModel {
  std::vector<RelLoc> exemplars;
  int n_clusters = 0;
  ClusterKind kind = ClusterKind::window_object;
  double preference = 0.0;
  double damping = 0.9;
  int max_iter = 1000;
  int stable_iter = 50;
  bool converged = false;

  bool fitted() const { return n_clusters >= 1; }
};

struct ApOptions {
  // Preference applied to every self-similarity; NaN selects AUTO
  // (median of the off-diagonal similarities).
  double preference = std::numeric_limits<double>::quiet_NaN();
  double damping = 0.9;
  int max_iter = 1000;
  int stable_iter = 50;
  ClusterKind kind = ClusterKind::window_object;
};

// Affinity propagation with similarity s(i,k) = -||p_i - p_k||^2.
// Deterministic: fixed iteration order, no symmetry-breaking noise.
ClusterModel ap_cluster(const std::vector<RelLoc>& points, const ApOptions& opts);

// Index (0-based) of the nearest exemplar under squared Euclidean distance;
// ties break toward the lowest index.
int assign(const ClusterModel& model, const RelLoc& p);

ClusterStats cluster_stats(const ClusterModel& model, const std::vector<RelLoc>& points);

// Net similarity of an exemplar assignment: sum over non-exemplars of the
// best similarity to an exemplar plus one preference term per exemplar.
double net_similarity(const std::vector<RelLoc>& points, const std::vector<int>& exemplar_idx,
                      double preference);

// Window-object relationship clusters. Fit per class when every class has
// at least `min_per_class` samples, pooled across classes otherwise; global
// cluster ids are 1-based and offset by class block.
struct WindowObjectClusters {
  bool per_class = false;
  std::vector<int> class_ids;          // classes with a model, ascending
  std::vector<ClusterModel> models;    // parallel to class_ids (or size 1 when pooled)
  std::vector<int> offsets;            // global id of each model's first cluster, 1-based

  int total_clusters() const;
  // Global cluster id in [1, total]; class_id is ignored in pooled mode.
  int assign_global(int class_id, const RelLoc& p) const;
};

WindowObjectClusters fit_window_object_clusters(
    const std::vector<std::pair<int, RelLoc>>& class_points, const ApOptions& opts,
    int min_per_class = 50, int max_points_per_fit = 400, int target_lo = 0, int target_hi = 0);

// Sweep the preference by powers of two until the cluster count lands in
// [lo, hi]; returns the model closest to the range if it never lands.
ClusterModel ap_cluster_target_range(const std::vector<RelLoc>& points, const ApOptions& opts,
                                     int lo, int hi, int max_trials = 16);

std::string cluster_model_to_json(const ClusterModel& model);
ClusterModel cluster_model_from_json(const std::string& text);

std::string window_object_clusters_to_json(const WindowObjectClusters& set);
WindowObjectClusters window_object_clusters_from_json(const std::string& text);

}  // namespace reldet
