#include "reldet/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace reldet {

namespace {

void check_normalized(const Tensor& post, const char* what) {
  const int B = post.dim(0), M = post.dim(1);
  for (int b = 0; b < B; ++b) {
    double sum = 0.0;
    for (int j = 0; j < M; ++j) sum += post.data[size_t(b) * M + j];
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument(std::string(what) + ": posterior row " + std::to_string(b) +
                                  " not normalized (sum " + std::to_string(sum) + ")");
  }
}

// -log p[target], from logits when available (log-sum-exp), else from the
// posterior directly.
double nll(const Tensor& post, const Tensor* logits, int row, int target) {
  const int M = post.dim(1);
  if (logits) {
    const double* l = logits->data.data() + size_t(row) * M;
    double mx = l[0];
    for (int j = 1; j < M; ++j) mx = std::max(mx, l[j]);
    double sum = 0.0;
    for (int j = 0; j < M; ++j) sum += std::exp(l[j] - mx);
    return mx + std::log(sum) - l[target];
  }
  const double p = post.data[size_t(row) * M + target];
  return -std::log(std::max(p, 1e-300));
}

}  // namespace

WindowObjectLossResult loss_window_object(const Tensor& cluster_post, const Tensor& loc_pred,
                                          const std::vector<SampleLabel>& labels,
                                          const Tensor* cluster_logits) {
  const int B = cluster_post.dim(0);
  const int N = cluster_post.dim(1);
  if (int(labels.size()) != B)
    throw std::invalid_argument("loss_window_object: label count != batch size");
  if (loc_pred.shape != std::vector<int>{B, N, 4})
    throw std::invalid_argument("loss_window_object: loc_pred must be (B, N, 4)");
  check_normalized(cluster_post, "loss_window_object");

  WindowObjectLossResult res;
  res.d_cluster_logits = Tensor({B, N});
  res.d_loc_pred = Tensor({B, N, 4});

  int m = 0;
  for (const SampleLabel& l : labels) {
    if (l.cluster_id < 0 || l.cluster_id > N)
      throw std::invalid_argument("loss_window_object: cluster_id out of range");
    if (l.cluster_id > 0) ++m;
  }
  res.n_supervised = m;
  if (m == 0) return res;

  const double inv_m = 1.0 / double(m);
  for (int b = 0; b < B; ++b) {
    const int cid = labels[b].cluster_id;
    if (cid == 0) continue;
    const int t = cid - 1;

    res.cls += nll(cluster_post, cluster_logits, b, t) * inv_m;
    for (int j = 0; j < N; ++j)
      res.d_cluster_logits.data[size_t(b) * N + j] =
          (cluster_post.data[size_t(b) * N + j] - (j == t ? 1.0 : 0.0)) * inv_m;

    // Only the true cluster's row is read or written; other rows never enter
    // the computation, so perturbing them cannot change anything.
    const double* pred = loc_pred.data.data() + (size_t(b) * N + t) * 4;
    double* dpred = res.d_loc_pred.data.data() + (size_t(b) * N + t) * 4;
    const RelLoc& tgt = labels[b].loc_target;
    for (int k = 0; k < 4; ++k) {
      const double diff = pred[k] - tgt[k];
      res.loc += diff * diff * inv_m;
      dpred[k] = 2.0 * diff * inv_m;
    }
  }
  return res;
}

LayoutLossResult loss_layout(const std::vector<Tensor>& layout_posts,
                             const std::vector<SampleLabel>& labels,
                             const std::vector<Tensor>* layout_logits) {
  LayoutLossResult res;
  const size_t K = layout_posts.size();
  if (layout_logits && layout_logits->size() != K)
    throw std::invalid_argument("loss_layout: logits/posts count mismatch");
  res.per_head.assign(K, 0.0);
  for (size_t k = 0; k < K; ++k) {
    const Tensor& post = layout_posts[k];
    const int B = post.dim(0), M = post.dim(1);
    if (int(labels.size()) != B)
      throw std::invalid_argument("loss_layout: label count != batch size");
    check_normalized(post, "loss_layout");
    const Tensor* logits = layout_logits ? &(*layout_logits)[k] : nullptr;
    Tensor d({B, M});
    const double inv_b = 1.0 / double(B);
    for (int b = 0; b < B; ++b) {
      if (int(labels[b].layout_labels.size()) != int(K))
        throw std::invalid_argument("loss_layout: sample has wrong layout label count");
      const int t = labels[b].layout_labels[k];
      if (t < 0 || t >= M) throw std::invalid_argument("loss_layout: label out of range");
      res.per_head[k] += nll(post, logits, b, t) * inv_b;
      for (int j = 0; j < M; ++j)
        d.data[size_t(b) * M + j] = (post.data[size_t(b) * M + j] - (j == t ? 1.0 : 0.0)) * inv_b;
    }
    res.d_layout_logits.push_back(std::move(d));
  }
  return res;
}

ClassifyLossResult loss_classify(const Tensor& post, const std::vector<int>& targets,
                                 const Tensor* logits) {
  const int B = post.dim(0), M = post.dim(1);
  if (int(targets.size()) != B)
    throw std::invalid_argument("loss_classify: target count != batch size");
  check_normalized(post, "loss_classify");
  ClassifyLossResult res;
  res.d_logits = Tensor({B, M});
  const double inv_b = 1.0 / double(B);
  for (int b = 0; b < B; ++b) {
    const int t = targets[b];
    if (t < 0 || t >= M) throw std::invalid_argument("loss_classify: target out of range");
    res.value += nll(post, logits, b, t) * inv_b;
    for (int j = 0; j < M; ++j)
      res.d_logits.data[size_t(b) * M + j] =
          (post.data[size_t(b) * M + j] - (j == t ? 1.0 : 0.0)) * inv_b;
  }
  return res;
}

}  // namespace reldet
