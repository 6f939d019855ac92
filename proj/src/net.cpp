#include "reldet/net.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace reldet {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

namespace {

void check_shape(const std::string& layer, const Tensor& x, const std::vector<int>& want_tail) {
  // want_tail matches all dims after the batch dim.
  if (x.shape.size() != want_tail.size() + 1) {
    throw std::invalid_argument("layer " + layer + ": input rank mismatch, got " + x.shape_str());
  }
  for (size_t i = 0; i < want_tail.size(); ++i)
    if (x.shape[i + 1] != want_tail[i])
      throw std::invalid_argument("layer " + layer + ": input shape mismatch, got " +
                                  x.shape_str());
}

double fanin_uniform_bound(int fan_in) { return std::sqrt(1.0 / double(fan_in)); }

}  // namespace

Conv3x3::Conv3x3(std::string name, int in_h, int in_w, int in_ch, int out_ch)
    : name_(std::move(name)), h_(in_h), w_(in_w), cin_(in_ch), cout_(out_ch) {
  weight.name = name_ + ".weight";
  weight.value.assign(size_t(9) * cin_ * cout_, 0.0);
  weight.grad.assign(weight.value.size(), 0.0);
  bias.name = name_ + ".bias";
  bias.value.assign(size_t(cout_), 0.0);
  bias.grad.assign(bias.value.size(), 0.0);
}

void Conv3x3::init(Rng& rng) {
  const double b = fanin_uniform_bound(9 * cin_);
  for (double& v : weight.value) v = rng.uniform(-b, b);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor Conv3x3::forward(const Tensor& x) {
  check_shape(name_, x, {h_, w_, cin_});
  const int B = x.dim(0);
  last_batch_ = B;
  const int K = 9 * cin_;
  const size_t rows = size_t(B) * h_ * w_;
  cols_.assign(rows * K, 0.0);

  // im2col with zero padding 1. Patch row order: (ky, kx, ci).
  for (int b = 0; b < B; ++b) {
    const double* img = x.data.data() + size_t(b) * h_ * w_ * cin_;
    for (int y = 0; y < h_; ++y) {
      for (int xx = 0; xx < w_; ++xx) {
        double* dst = cols_.data() + (size_t(b) * h_ * w_ + size_t(y) * w_ + xx) * K;
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h_) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w_) continue;
            const double* src = img + (size_t(sy) * w_ + sx) * cin_;
            std::copy(src, src + cin_, dst + (ky * 3 + kx) * cin_);
          }
        }
      }
    }
  }

  Tensor y({B, h_, w_, cout_});
  MapRM ym(y.data.data(), rows, cout_);
  CMapRM cm(cols_.data(), rows, K);
  CMapRM wm(weight.value.data(), K, cout_);
  ym.noalias() = cm * wm;
  Eigen::Map<const Eigen::VectorXd> bm(bias.value.data(), cout_);
  ym.rowwise() += bm.transpose();
  return y;
}

Tensor Conv3x3::backward(const Tensor& dy) {
  check_shape(name_ + ".backward", dy, {h_, w_, cout_});
  const int B = dy.dim(0);
  if (B != last_batch_)
    throw std::logic_error("layer " + name_ + ": backward batch differs from forward");
  const int K = 9 * cin_;
  const size_t rows = size_t(B) * h_ * w_;

  CMapRM dym(dy.data.data(), rows, cout_);
  CMapRM cm(cols_.data(), rows, K);
  MapRM wgm(weight.grad.data(), K, cout_);
  wgm.noalias() += cm.transpose() * dym;
  // Fixed-order bias reduction: Eigen reductions over mapped memory vary
  // with allocation alignment, which breaks bitwise reproducibility.
  for (size_t r = 0; r < rows; ++r)
    for (int c = 0; c < cout_; ++c) bias.grad[size_t(c)] += dy.data[r * cout_ + c];

  RowMat dcols(rows, K);
  CMapRM wm(weight.value.data(), K, cout_);
  dcols.noalias() = dym * wm.transpose();

  // col2im accumulate.
  Tensor dx({B, h_, w_, cin_});
  for (int b = 0; b < B; ++b) {
    double* dst_img = dx.data.data() + size_t(b) * h_ * w_ * cin_;
    for (int y = 0; y < h_; ++y) {
      for (int xx = 0; xx < w_; ++xx) {
        const double* src = dcols.data() + (size_t(b) * h_ * w_ + size_t(y) * w_ + xx) * K;
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h_) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w_) continue;
            double* d = dst_img + (size_t(sy) * w_ + sx) * cin_;
            const double* s = src + (ky * 3 + kx) * cin_;
            for (int c = 0; c < cin_; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
  return dx;
}

Tensor Relu::forward(const Tensor& x) {
  Tensor y = x;
  mask_.assign(x.numel(), false);
  last_margin_ = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < y.data.size(); ++i) {
    last_margin_ = std::min(last_margin_, std::abs(y.data[i]));
    if (y.data[i] > 0.0) {
      mask_[i] = true;
    } else {
      y.data[i] = 0.0;
    }
  }
  return y;
}

Tensor Relu::backward(const Tensor& dy) const {
  if (dy.numel() != mask_.size())
    throw std::logic_error("layer " + name_ + ": backward size differs from forward");
  Tensor dx = dy;
  for (size_t i = 0; i < dx.data.size(); ++i)
    if (!mask_[i]) dx.data[i] = 0.0;
  return dx;
}

MaxPool2::MaxPool2(std::string name, int in_h, int in_w, int ch)
    : name_(std::move(name)), h_(in_h), w_(in_w), ch_(ch) {
  if (h_ % 2 != 0 || w_ % 2 != 0)
    throw std::invalid_argument("layer " + name_ + ": input spatial dims must be even");
}

Tensor MaxPool2::forward(const Tensor& x) {
  check_shape(name_, x, {h_, w_, ch_});
  const int B = x.dim(0);
  last_batch_ = B;
  const int oh = h_ / 2, ow = w_ / 2;
  in_numel_per_item_ = size_t(h_) * w_ * ch_;
  Tensor y({B, oh, ow, ch_});
  argmax_.assign(y.numel(), 0);
  last_margin_ = std::numeric_limits<double>::infinity();
  for (int b = 0; b < B; ++b) {
    const double* img = x.data.data() + size_t(b) * in_numel_per_item_;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int c = 0; c < ch_; ++c) {
          double best = -std::numeric_limits<double>::infinity();
          double second = -std::numeric_limits<double>::infinity();
          int best_idx = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = ((oy * 2 + dy) * w_ + (ox * 2 + dx)) * ch_ + c;
              if (img[idx] > best) {
                second = best;
                best = img[idx];
                best_idx = idx;
              } else if (img[idx] > second) {
                second = img[idx];
              }
            }
          }
          last_margin_ = std::min(last_margin_, best - second);
          const size_t out_idx =
              size_t(b) * oh * ow * ch_ + (size_t(oy) * ow + ox) * ch_ + c;
          y.data[out_idx] = best;
          argmax_[out_idx] = best_idx;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2::backward(const Tensor& dy) const {
  if (dy.numel() != argmax_.size())
    throw std::logic_error("layer " + name_ + ": backward size differs from forward");
  const int B = last_batch_;
  Tensor dx({B, h_, w_, ch_});
  const size_t per_item_out = dy.numel() / size_t(B);
  for (int b = 0; b < B; ++b) {
    double* dst = dx.data.data() + size_t(b) * in_numel_per_item_;
    const size_t base = size_t(b) * per_item_out;
    for (size_t i = 0; i < per_item_out; ++i) dst[argmax_[base + i]] += dy.data[base + i];
  }
  return dx;
}

Dense::Dense(std::string name, int in_dim, int out_dim)
    : name_(std::move(name)), in_dim_(in_dim), out_dim_(out_dim) {
  weight.name = name_ + ".weight";
  weight.value.assign(size_t(in_dim_) * out_dim_, 0.0);
  weight.grad.assign(weight.value.size(), 0.0);
  bias.name = name_ + ".bias";
  bias.value.assign(size_t(out_dim_), 0.0);
  bias.grad.assign(bias.value.size(), 0.0);
}

void Dense::init(Rng& rng) {
  const double b = fanin_uniform_bound(in_dim_);
  for (double& v : weight.value) v = rng.uniform(-b, b);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor Dense::forward(const Tensor& x) {
  const int B = x.dim(0);
  if (int(x.numel() / size_t(B)) != in_dim_)
    throw std::invalid_argument("layer " + name_ + ": expected flattened dim " +
                                std::to_string(in_dim_) + ", got " + x.shape_str());
  last_batch_ = B;
  last_input_ = x.data;
  Tensor y({B, out_dim_});
  MapRM ym(y.data.data(), B, out_dim_);
  CMapRM xm(x.data.data(), B, in_dim_);
  CMapRM wm(weight.value.data(), in_dim_, out_dim_);
  ym.noalias() = xm * wm;
  Eigen::Map<const Eigen::VectorXd> bm(bias.value.data(), out_dim_);
  ym.rowwise() += bm.transpose();
  return y;
}

Tensor Dense::backward(const Tensor& dy) {
  check_shape(name_ + ".backward", dy, {out_dim_});
  const int B = dy.dim(0);
  if (B != last_batch_)
    throw std::logic_error("layer " + name_ + ": backward batch differs from forward");
  CMapRM dym(dy.data.data(), B, out_dim_);
  CMapRM xm(last_input_.data(), B, in_dim_);
  MapRM wgm(weight.grad.data(), in_dim_, out_dim_);
  wgm.noalias() += xm.transpose() * dym;
  // Fixed-order bias reduction (see Conv3x3::backward).
  for (int r = 0; r < B; ++r)
    for (int c = 0; c < out_dim_; ++c)
      bias.grad[size_t(c)] += dy.data[size_t(r) * out_dim_ + c];

  Tensor dx({B, in_dim_});
  MapRM dxm(dx.data.data(), B, in_dim_);
  CMapRM wm(weight.value.data(), in_dim_, out_dim_);
  dxm.noalias() = dym * wm.transpose();
  return dx;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.shape.size() != 2) throw std::invalid_argument("softmax_rows: expected rank 2");
  const int B = logits.dim(0), M = logits.dim(1);
  Tensor post({B, M});
  for (int b = 0; b < B; ++b) {
    const double* in = logits.data.data() + size_t(b) * M;
    double* out = post.data.data() + size_t(b) * M;
    double mx = in[0];
    for (int j = 1; j < M; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < M; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (int j = 0; j < M; ++j) out[j] /= sum;
  }
  return post;
}

BranchNet::BranchNet(const NetConfig& cfg, const HeadConfig& heads, uint64_t seed) : cfg_(cfg) {
  const int S = cfg.input_size;
  if (S % 4 != 0) throw std::invalid_argument("BranchNet: input_size must be divisible by 4");
  conv1_ = std::make_unique<Conv3x3>("conv1", S, S, 1, cfg.conv1_channels);
  relu1_ = std::make_unique<Relu>("relu1");
  pool1_ = std::make_unique<MaxPool2>("pool1", S, S, cfg.conv1_channels);
  conv2_ = std::make_unique<Conv3x3>("conv2", S / 2, S / 2, cfg.conv1_channels,
                                     cfg.conv2_channels);
  relu2_ = std::make_unique<Relu>("relu2");
  pool2_ = std::make_unique<MaxPool2>("pool2", S / 2, S / 2, cfg.conv2_channels);
  const int flat = (S / 4) * (S / 4) * cfg.conv2_channels;
  fc_ = std::make_unique<Dense>("fc_feature", flat, cfg.feature_dim);

  Rng rng(seed);
  conv1_->init(rng);
  conv2_->init(rng);
  fc_->init(rng);
  replace_heads(heads, rng.next_u64());
}

void BranchNet::replace_heads(const HeadConfig& heads, uint64_t seed) {
  heads_cfg_ = heads;
  head_cluster_.reset();
  head_loc_.reset();
  head_layout_.clear();
  head_classify_.reset();
  Rng rng(seed);
  const int D = cfg_.feature_dim;
  if (heads.n_clusters > 0) {
    head_cluster_ = std::make_unique<Dense>("head_cluster", D, heads.n_clusters);
    head_cluster_->init(rng);
    head_loc_ = std::make_unique<Dense>("head_location", D, heads.n_clusters * 4);
    head_loc_->init(rng);
  }
  if (heads.n_layout > 0) {
    if (heads.n_layout_classes < 2)
      throw std::invalid_argument("BranchNet: layout heads need n_layout_classes >= 2");
    for (int k = 0; k < heads.n_layout; ++k) {
      head_layout_.push_back(std::make_unique<Dense>("head_layout" + std::to_string(k), D,
                                                     heads.n_layout_classes));
      head_layout_.back()->init(rng);
    }
  }
  if (heads.n_classify > 0) {
    head_classify_ = std::make_unique<Dense>("head_classify", D, heads.n_classify);
    head_classify_->init(rng);
  }
}

double BranchNet::activation_margin() const {
  double m = std::min(relu1_->last_margin(), relu2_->last_margin());
  m = std::min(m, std::min(pool1_->last_margin(), pool2_->last_margin()));
  return m;
}

Tensor BranchNet::features(const Tensor& batch) {
  last_batch_ = batch.dim(0);
  Tensor t = conv1_->forward(batch);
  t = relu1_->forward(t);
  t = pool1_->forward(t);
  t = conv2_->forward(t);
  t = relu2_->forward(t);
  t = pool2_->forward(t);
  return fc_->forward(t);
}

HeadOutputs BranchNet::heads_forward(const Tensor& features) {
  HeadOutputs out;
  if (head_cluster_) {
    out.cluster_logits = head_cluster_->forward(features);
    out.cluster_post = softmax_rows(out.cluster_logits);
    Tensor loc = head_loc_->forward(features);
    loc.shape = {features.dim(0), heads_cfg_.n_clusters, 4};
    out.loc_pred = std::move(loc);
  }
  for (auto& head : head_layout_) {
    Tensor logits = head->forward(features);
    out.layout_post.push_back(softmax_rows(logits));
    out.layout_logits.push_back(std::move(logits));
  }
  if (head_classify_) {
    out.classify_logits = head_classify_->forward(features);
    out.classify_post = softmax_rows(out.classify_logits);
  }
  return out;
}

Tensor BranchNet::heads_backward(const HeadGrads& grads) {
  Tensor d_features({last_batch_, cfg_.feature_dim});
  auto add = [&](const Tensor& part) {
    for (size_t i = 0; i < d_features.data.size(); ++i) d_features.data[i] += part.data[i];
  };
  if (grads.d_cluster_logits) {
    if (!head_cluster_) throw std::logic_error("heads_backward: no cluster head attached");
    add(head_cluster_->backward(*grads.d_cluster_logits));
  }
  if (grads.d_loc_pred) {
    if (!head_loc_) throw std::logic_error("heads_backward: no location head attached");
    Tensor flat = *grads.d_loc_pred;
    flat.shape = {last_batch_, heads_cfg_.n_clusters * 4};
    add(head_loc_->backward(flat));
  }
  if (!grads.d_layout_logits.empty()) {
    if (grads.d_layout_logits.size() != head_layout_.size())
      throw std::logic_error("heads_backward: layout gradient count mismatch");
    for (size_t k = 0; k < head_layout_.size(); ++k)
      add(head_layout_[k]->backward(grads.d_layout_logits[k]));
  }
  if (grads.d_classify_logits) {
    if (!head_classify_) throw std::logic_error("heads_backward: no classify head attached");
    add(head_classify_->backward(*grads.d_classify_logits));
  }
  return d_features;
}

void BranchNet::trunk_backward(const Tensor& d_features) {
  Tensor t = fc_->backward(d_features);
  t.shape = {last_batch_, cfg_.input_size / 2, cfg_.input_size / 2, cfg_.conv2_channels};
  t = pool2_->backward(t);
  t = relu2_->backward(t);
  t = conv2_->backward(t);
  t.shape = {last_batch_, cfg_.input_size, cfg_.input_size, cfg_.conv1_channels};
  t = pool1_->backward(t);
  t = relu1_->backward(t);
  conv1_->backward(t);
}

std::vector<Param*> BranchNet::trunk_params() {
  return {&conv1_->weight, &conv1_->bias, &conv2_->weight, &conv2_->bias,
          &fc_->weight,    &fc_->bias};
}

std::vector<Param*> BranchNet::params() {
  std::vector<Param*> ps = trunk_params();
  if (head_cluster_) {
    ps.push_back(&head_cluster_->weight);
    ps.push_back(&head_cluster_->bias);
    ps.push_back(&head_loc_->weight);
    ps.push_back(&head_loc_->bias);
  }
  for (auto& head : head_layout_) {
    ps.push_back(&head->weight);
    ps.push_back(&head->bias);
  }
  if (head_classify_) {
    ps.push_back(&head_classify_->weight);
    ps.push_back(&head_classify_->bias);
  }
  return ps;
}

void BranchNet::zero_grads() {
  for (Param* p : params()) p->zero_grad();
}

void SgdOptimizer::step(const std::vector<Param*>& params, double lr) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i]->value.size(), 0.0);
  }
  if (velocity_.size() != params.size())
    throw std::logic_error("SgdOptimizer: parameter set changed between steps");
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    AlignedVec& v = velocity_[i];
    if (v.size() != p.value.size())
      throw std::logic_error("SgdOptimizer: parameter size changed between steps");
    for (size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      if (!std::isfinite(g))
        throw NumericalError("non-finite gradient in " + p.name + " at index " +
                             std::to_string(j));
      v[j] = momentum_ * v[j] - lr * g;
      p.value[j] += v[j];
    }
  }
}

Tensor concat_features(const std::vector<Tensor>& branch_features) {
  if (branch_features.empty()) throw std::invalid_argument("concat_features: no inputs");
  const int B = branch_features[0].dim(0);
  int total = 0;
  for (const Tensor& f : branch_features) {
    if (f.shape.size() != 2) throw std::invalid_argument("concat_features: expected rank 2");
    if (f.dim(0) != B) throw std::invalid_argument("concat_features: batch size mismatch");
    total += f.dim(1);
  }
  Tensor out({B, total});
  for (int b = 0; b < B; ++b) {
    double* dst = out.data.data() + size_t(b) * total;
    for (const Tensor& f : branch_features) {
      const int d = f.dim(1);
      const double* src = f.data.data() + size_t(b) * d;
      std::copy(src, src + d, dst);
      dst += d;
    }
  }
  return out;
}

std::vector<Tensor> split_features(const Tensor& d_concat, const std::vector<int>& dims) {
  const int B = d_concat.dim(0);
  int total = 0;
  for (int d : dims) total += d;
  if (d_concat.dim(1) != total)
    throw std::invalid_argument("split_features: dims do not sum to input width");
  std::vector<Tensor> parts;
  parts.reserve(dims.size());
  int offset = 0;
  for (int d : dims) {
    Tensor t({B, d});
    for (int b = 0; b < B; ++b) {
      const double* src = d_concat.data.data() + size_t(b) * total + offset;
      std::copy(src, src + d, t.data.data() + size_t(b) * d);
    }
    offset += d;
    parts.push_back(std::move(t));
  }
  return parts;
}

}  // namespace reldet
