#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "reldet/rng.hpp"
#include "reldet/tensor.hpp"

namespace reldet {

// Thrown when training hits a non-finite value; maps to CLI exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One named parameter tensor with its gradient accumulator.
struct Param {
  std::string name;
  AlignedVec value;
  AlignedVec grad;

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
class Conv3x3 {
 public:
  Conv3x3(std::string name, int in_h, int in_w, int in_ch, int out_ch);
  void init(Rng& rng);
  Tensor forward(const Tensor& x);    // (B,H,W,Cin) -> (B,H,W,Cout)
  Tensor backward(const Tensor& dy);  // accumulates grads, returns dx

  Param weight;  // (9*Cin, Cout), patch-major rows
  Param bias;    // (Cout)
  int out_h() const { return h_; }
  int out_w() const { return w_; }
  int out_ch() const { return cout_; }

 private:
  std::string name_;
  int h_, w_, cin_, cout_;
  AlignedVec cols_;  // cached im2col of the last input
  int last_batch_ = 0;
};

class Relu {
 public:
  explicit Relu(std::string name) : name_(std::move(name)) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;
  // Smallest |pre-activation| seen by the last forward.
  double last_margin() const { return last_margin_; }

 private:
  std::string name_;
  std::vector<bool> mask_;
  double last_margin_ = 0.0;
};

// 2x2 max pooling, stride 2.
class MaxPool2 {
 public:
  MaxPool2(std::string name, int in_h, int in_w, int ch);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;
  int out_h() const { return h_ / 2; }
  int out_w() const { return w_ / 2; }
  // Smallest top-2 gap across pooling windows in the last forward.
  double last_margin() const { return last_margin_; }

 private:
  std::string name_;
  int h_, w_, ch_;
  double last_margin_ = 0.0;
  std::vector<int> argmax_;
  int last_batch_ = 0;
  size_t in_numel_per_item_ = 0;
};

// Fully connected layer over flattened input.
class Dense {
 public:
  Dense(std::string name, int in_dim, int out_dim);
  void init(Rng& rng);
  Tensor forward(const Tensor& x);    // (B, ...) -> (B, out_dim)
  Tensor backward(const Tensor& dy);  // returns dx with shape (B, in_dim)

  Param weight;  // (in_dim, out_dim)
  Param bias;    // (out_dim)
  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }

 private:
  std::string name_;
  int in_dim_, out_dim_;
  AlignedVec last_input_;
  int last_batch_ = 0;
};

struct NetConfig {
  int input_size = 32;
  int conv1_channels = 8;
  int conv2_channels = 16;
  int feature_dim = 64;
};

struct HeadConfig {
  int n_clusters = 0;        // N-way cluster head + N x 4 location head when > 0
  int n_layout = 0;          // K layout heads
  int n_layout_classes = 0;  // width of each layout head (C + 1)
  int n_classify = 0;        // classification head width when > 0

  bool any() const { return n_clusters > 0 || n_layout > 0 || n_classify > 0; }
};

struct HeadOutputs {
  Tensor cluster_logits, cluster_post;          // (B, N)
  Tensor loc_pred;                              // (B, N, 4)
  std::vector<Tensor> layout_logits;            // K x (B, C+1)
  std::vector<Tensor> layout_post;
  Tensor classify_logits, classify_post;        // (B, n_classify)
};

// Gradients w.r.t. the head outputs feeding the loss (logit-space for the
// softmax heads, raw output space for the location head).
struct HeadGrads {
  std::optional<Tensor> d_cluster_logits;
  std::optional<Tensor> d_loc_pred;
  std::vector<Tensor> d_layout_logits;  // empty or K entries
  std::optional<Tensor> d_classify_logits;
};

// Numerically stable softmax along the last axis of a (B, M) tensor.
Tensor softmax_rows(const Tensor& logits);

// Per-(rotation, scale) branch: the convolutional trunk producing the
// feature vector, plus swappable output heads.
class BranchNet {
 public:
  BranchNet(const NetConfig& cfg, const HeadConfig& heads, uint64_t seed);

  // Feature layers only: (B, S, S, 1) -> (B, feature_dim).
  Tensor features(const Tensor& batch);

  // Smallest distance to a rectifier or pooling non-differentiability in the
  // last features() pass. Finite-difference gradient probes are only valid
  // when this comfortably exceeds the probe step.
  double activation_margin() const;
  HeadOutputs heads_forward(const Tensor& features);

  // Backprop. heads_backward returns d_features; trunk_backward consumes it.
  Tensor heads_backward(const HeadGrads& grads);
  void trunk_backward(const Tensor& d_features);

  // Replace the heads (stage transitions), keeping trunk parameters.
  void replace_heads(const HeadConfig& heads, uint64_t seed);

  std::vector<Param*> params();        // trunk then heads, declaration order
  std::vector<Param*> trunk_params();
  void zero_grads();

  const NetConfig& config() const { return cfg_; }
  const HeadConfig& head_config() const { return heads_cfg_; }

 private:
  NetConfig cfg_;
  HeadConfig heads_cfg_;
  std::unique_ptr<Conv3x3> conv1_;
  std::unique_ptr<Relu> relu1_;
  std::unique_ptr<MaxPool2> pool1_;
  std::unique_ptr<Conv3x3> conv2_;
  std::unique_ptr<Relu> relu2_;
  std::unique_ptr<MaxPool2> pool2_;
  std::unique_ptr<Dense> fc_;
  std::unique_ptr<Dense> head_cluster_;
  std::unique_ptr<Dense> head_loc_;
  std::vector<std::unique_ptr<Dense>> head_layout_;
  std::unique_ptr<Dense> head_classify_;
  int last_batch_ = 0;
};

// SGD with momentum: v <- momentum * v - lr * grad; p <- p + v.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(double momentum = 0.9) : momentum_(momentum) {}
  void step(const std::vector<Param*>& params, double lr);

 private:
  double momentum_;
  std::vector<AlignedVec> velocity_;
};

// Concatenate per-branch feature matrices along the feature axis in the
// given order. All inputs must share the batch size.
Tensor concat_features(const std::vector<Tensor>& branch_features);

// Split a gradient over concatenated features back into per-branch parts.
std::vector<Tensor> split_features(const Tensor& d_concat, const std::vector<int>& dims);

}  // namespace reldet
