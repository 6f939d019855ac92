#pragma once

#include <optional>
#include <vector>

#include "reldet/labeling.hpp"
#include "reldet/net.hpp"

namespace reldet {

// Loss components for one batch. Components are means over their
// supervising samples; total is the unit-weight sum of present components.
struct LossBundle {
  double total = 0.0;
  std::optional<double> cls;
  std::optional<double> loc;
  std::vector<double> layout;
  std::optional<double> classify;

  void finish() {
    total = cls.value_or(0.0) + loc.value_or(0.0) + classify.value_or(0.0);
    for (double v : layout) total += v;
  }
};

struct WindowObjectLossResult {
  double cls = 0.0;
  double loc = 0.0;
  Tensor d_cluster_logits;  // (B, N)
  Tensor d_loc_pred;        // (B, N, 4); rows other than the true cluster stay zero
  int n_supervised = 0;     // samples with cluster_id > 0
};

// Cross-entropy on the true cluster plus squared error on the true cluster's
// location row. Background samples (cluster_id == 0) contribute to neither
// term and receive zero gradients. When logits are supplied the cross-entropy
// is evaluated in logit space (log-sum-exp); cluster_post is always checked
// for normalization within 1e-6.
WindowObjectLossResult loss_window_object(const Tensor& cluster_post, const Tensor& loc_pred,
                                          const std::vector<SampleLabel>& labels,
                                          const Tensor* cluster_logits = nullptr);

struct LayoutLossResult {
  std::vector<double> per_head;       // K entries
  std::vector<Tensor> d_layout_logits;
};

LayoutLossResult loss_layout(const std::vector<Tensor>& layout_posts,
                             const std::vector<SampleLabel>& labels,
                             const std::vector<Tensor>* layout_logits = nullptr);

struct ClassifyLossResult {
  double value = 0.0;
  Tensor d_logits;
};

// Standard cross-entropy; targets are 0-based indices into the head width.
ClassifyLossResult loss_classify(const Tensor& post, const std::vector<int>& targets,
                                 const Tensor* logits = nullptr);

}  // namespace reldet
