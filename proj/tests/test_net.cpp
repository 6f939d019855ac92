#include <cmath>
#include <filesystem>
#include <functional>

#include "doctest.h"
#include "reldet/checkpoint.hpp"
#include "reldet/losses.hpp"
#include "reldet/net.hpp"
#include "reldet/rng.hpp"

using namespace reldet;

namespace {

constexpr double kEps = 1e-4;
constexpr double kTol = 1e-3;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

NetConfig tiny_net() {
  NetConfig cfg;
  cfg.input_size = 8;
  cfg.conv1_channels = 2;
  cfg.conv2_channels = 3;
  cfg.feature_dim = 6;
  return cfg;
}

Tensor random_batch(Rng& rng, int b, int s) {
  Tensor t({b, s, s, 1});
  for (double& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

std::vector<SampleLabel> random_labels(Rng& rng, int b, int n_clusters, int n_layout, int C,
                                       bool with_background) {
  std::vector<SampleLabel> labels(b);
  for (int i = 0; i < b; ++i) {
    SampleLabel& l = labels[i];
    const bool bg = with_background && rng.bernoulli(0.3);
    if (bg) {
      l.class_id = 0;
      l.cluster_id = 0;
    } else {
      l.class_id = 1 + int(rng.uniform_index(uint64_t(C)));
      l.cluster_id = 1 + int(rng.uniform_index(uint64_t(n_clusters)));
      l.loc_target = RelLoc(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                            rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    }
    for (int k = 0; k < n_layout; ++k)
      l.layout_labels.push_back(int(rng.uniform_index(uint64_t(C + 1))));
  }
  return labels;
}

// Total loss for the attached heads; used both for the analytic pass and for
// the finite-difference probes.
double head_loss(BranchNet& net, const Tensor& batch, const std::vector<SampleLabel>& labels,
                 const std::vector<int>& classify_targets, HeadGrads* grads) {
  const Tensor feats = net.features(batch);
  HeadOutputs out = net.heads_forward(feats);
  double total = 0.0;
  HeadGrads g;
  if (net.head_config().n_clusters > 0) {
    const WindowObjectLossResult wo =
        loss_window_object(out.cluster_post, out.loc_pred, labels, &out.cluster_logits);
    total += wo.cls + wo.loc;
    g.d_cluster_logits = wo.d_cluster_logits;
    g.d_loc_pred = wo.d_loc_pred;
  }
  if (net.head_config().n_layout > 0) {
    const LayoutLossResult lay = loss_layout(out.layout_post, labels, &out.layout_logits);
    for (double v : lay.per_head) total += v;
    g.d_layout_logits = lay.d_layout_logits;
  }
  if (net.head_config().n_classify > 0) {
    const ClassifyLossResult cl =
        loss_classify(out.classify_post, classify_targets, &out.classify_logits);
    total += cl.value;
    g.d_classify_logits = cl.d_logits;
  }
  if (grads) *grads = std::move(g);
  return total;
}

struct FdStats {
  size_t checked = 0;
  size_t primary_failures = 0;  // params outside tolerance at the primary eps
  bool real_bug = false;        // a failure survived the refined-eps probe
  double worst = 0.0;
};

// Central finite differences over every parameter. A parameter failing at
// the primary eps is re-probed at a much smaller step: a rectifier/pool kink
// inside the primary probe interval passes the refined probe, a genuine
// gradient bug fails both.
FdStats fd_check(const std::vector<Param*>& params, const std::function<double()>& loss_fn,
                 const std::function<double()>& analytic_fn) {
  analytic_fn();
  std::vector<AlignedVec> analytic;
  for (Param* p : params) analytic.push_back(p->grad);

  auto probe = [&](Param& p, size_t j, double eps) {
    const double saved = p.value[j];
    p.value[j] = saved + eps;
    const double lp = loss_fn();
    p.value[j] = saved - eps;
    const double lm = loss_fn();
    p.value[j] = saved;
    return (lp - lm) / (2.0 * eps);
  };

  FdStats st;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    for (size_t j = 0; j < p.value.size(); ++j) {
      const double err = rel_err(probe(p, j, kEps), analytic[pi][j]);
      st.worst = std::max(st.worst, err);
      ++st.checked;
      if (err > kTol) {
        ++st.primary_failures;
        const double refined = rel_err(probe(p, j, 1e-6), analytic[pi][j]);
        if (refined > kTol) {
          CAPTURE(p.name);
          CAPTURE(j);
          CAPTURE(err);
          CAPTURE(refined);
          st.real_bug = true;
          CHECK(refined <= kTol);
          return st;
        }
      }
    }
  }
  return st;
}

}  // namespace

TEST_CASE("softmax rows sum to one and batch rows are independent") {
  Rng rng(3);
  Tensor logits({8, 5});
  for (double& v : logits.data) v = rng.uniform(-4, 4);
  const Tensor post = softmax_rows(logits);
  for (int b = 0; b < 8; ++b) {
    double sum = 0;
    for (int j = 0; j < 5; ++j) sum += post.data[size_t(b) * 5 + j];
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }

  BranchNet net(tiny_net(), HeadConfig{}, 77);
  Tensor big = random_batch(rng, 8, 8);
  const Tensor f_big = net.features(big);
  Tensor one({1, 8, 8, 1});
  const int row = 5;
  std::copy(big.data.begin() + size_t(row) * 64, big.data.begin() + size_t(row + 1) * 64,
            one.data.begin());
  const Tensor f_one = net.features(one);
  for (int j = 0; j < 6; ++j)
    CHECK(f_one.data[j] == doctest::Approx(f_big.data[size_t(row) * 6 + j]).epsilon(1e-12));
}

TEST_CASE("forward determinism and zero-logit uniformity") {
  Rng rng(4);
  const Tensor batch = random_batch(rng, 3, 8);
  HeadConfig heads;
  heads.n_clusters = 4;
  heads.n_classify = 5;
  BranchNet n1(tiny_net(), heads, 123);
  BranchNet n2(tiny_net(), heads, 123);
  const Tensor f1 = n1.features(batch), f2 = n2.features(batch);
  REQUIRE(f1.data == f2.data);
  HeadOutputs o1 = n1.heads_forward(f1), o2 = n2.heads_forward(f2);
  CHECK(o1.cluster_post.data == o2.cluster_post.data);
  CHECK(o1.loc_pred.data == o2.loc_pred.data);

  // Zero the head weights: posteriors become exactly uniform.
  for (Param* p : n1.params())
    if (p->name.rfind("head_", 0) == 0)
      std::fill(p->value.begin(), p->value.end(), 0.0);
  HeadOutputs oz = n1.heads_forward(n1.features(batch));
  for (double v : oz.cluster_post.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  for (double v : oz.classify_post.data) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("shape mismatch errors name the offending layer") {
  BranchNet net(tiny_net(), HeadConfig{}, 1);
  Tensor bad({2, 7, 8, 1});
  try {
    net.features(bad);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("conv1") != std::string::npos);
  }
}

TEST_CASE("loss closed forms") {
  // Uniform posterior over N=4 clusters -> cls = ln 4 per supervised sample.
  const int B = 3, N = 4;
  Tensor post({B, N});
  std::fill(post.data.begin(), post.data.end(), 0.25);
  Tensor loc({B, N, 4});
  std::vector<SampleLabel> labels(B);
  for (int i = 0; i < B; ++i) {
    labels[i].class_id = 1;
    labels[i].cluster_id = 1 + i;
    labels[i].loc_target = RelLoc();
  }
  const WindowObjectLossResult wo = loss_window_object(post, loc, labels);
  CHECK(wo.cls == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(wo.loc == doctest::Approx(0.0));

  // Perfect prediction -> zero loss.
  Tensor perfect({1, N});
  perfect.data = {1.0, 0.0, 0.0, 0.0};
  Tensor ploc({1, N, 4});
  std::vector<SampleLabel> pl(1);
  pl[0].class_id = 1;
  pl[0].cluster_id = 1;
  pl[0].loc_target = RelLoc(0.5, 0, 0, 0);
  ploc.data[0] = 0.5;
  const WindowObjectLossResult pwo = loss_window_object(perfect, ploc, pl);
  CHECK(pwo.cls == doctest::Approx(0.0));
  CHECK(pwo.loc == doctest::Approx(0.0));

  // Location off by (0.1,0,0,0) on the true row only -> loc = 0.01; garbage
  // rows contribute nothing and get exactly zero gradient.
  Tensor gloc({1, N, 4});
  for (size_t i = 0; i < gloc.data.size(); ++i) gloc.data[i] = 1e9;  // garbage
  gloc.data[0] = 0.6;  // row 0 = true row
  gloc.data[1] = 0.0;
  gloc.data[2] = 0.0;
  gloc.data[3] = 0.0;
  const WindowObjectLossResult gwo = loss_window_object(perfect, gloc, pl);
  CHECK(gwo.loc == doctest::Approx(0.01).epsilon(1e-12));
  for (int n = 1; n < N; ++n)
    for (int k = 0; k < 4; ++k) CHECK(gwo.d_loc_pred.data[size_t(n) * 4 + k] == 0.0);

  // Layout: uniform posteriors, C+1 = 5, K = 3 -> 3 ln 5 per sample.
  const int K = 3, M = 5;
  std::vector<Tensor> posts(K, Tensor({1, M}));
  for (auto& p : posts) std::fill(p.data.begin(), p.data.end(), 0.2);
  std::vector<SampleLabel> ll(1);
  ll[0].layout_labels = {0, 2, 4};
  const LayoutLossResult lay = loss_layout(posts, ll);
  double lay_total = 0;
  for (double v : lay.per_head) lay_total += v;
  CHECK(lay_total == doctest::Approx(3.0 * std::log(5.0)).epsilon(1e-12));

  // Single head at 0.5 on the truth adds ln 2.
  std::vector<Tensor> posts2(1, Tensor({1, 2}));
  posts2[0].data = {0.5, 0.5};
  std::vector<SampleLabel> l2(1);
  l2[0].layout_labels = {1};
  CHECK(loss_layout(posts2, l2).per_head[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Classify: uniform over 5 -> ln 5; 0.25 on truth -> ln 4; one-hot -> 0.
  Tensor cp({1, 5});
  std::fill(cp.data.begin(), cp.data.end(), 0.2);
  CHECK(loss_classify(cp, {3}).value == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  cp.data = {0.25, 0.25, 0.25, 0.25, 0.0};
  CHECK(loss_classify(cp, {1}).value == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  cp.data = {0.0, 1.0, 0.0, 0.0, 0.0};
  CHECK(loss_classify(cp, {1}).value == doctest::Approx(0.0));
}

TEST_CASE("loss rejects unnormalized posteriors") {
  Tensor post({1, 3});
  post.data = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(loss_classify(post, {0}), std::invalid_argument);
}

TEST_CASE("loss additivity: total equals the sum of attached components") {
  Rng rng(31);
  HeadConfig heads;
  heads.n_clusters = 3;
  heads.n_layout = 2;
  heads.n_layout_classes = 5;
  heads.n_classify = 5;
  BranchNet net(tiny_net(), heads, 9);
  const Tensor batch = random_batch(rng, 4, 8);
  const auto labels = random_labels(rng, 4, 3, 2, 4, true);
  std::vector<int> targets;
  for (const auto& l : labels) targets.push_back(l.class_id);

  const Tensor feats = net.features(batch);
  HeadOutputs out = net.heads_forward(feats);
  const WindowObjectLossResult wo =
      loss_window_object(out.cluster_post, out.loc_pred, labels, &out.cluster_logits);
  const LayoutLossResult lay = loss_layout(out.layout_post, labels, &out.layout_logits);
  const ClassifyLossResult cl =
      loss_classify(out.classify_post, targets, &out.classify_logits);

  LossBundle bundle;
  bundle.cls = wo.cls;
  bundle.loc = wo.loc;
  bundle.layout = lay.per_head;
  bundle.classify = cl.value;
  bundle.finish();
  double manual = wo.cls + wo.loc + cl.value;
  for (double v : lay.per_head) manual += v;
  CHECK(bundle.total == manual);
}

TEST_CASE("gradients match central finite differences for all stage head combos") {
  Rng rng(271828);
  const int C = 4;
  int instances = 0;
  for (int trial = 0; trial < 200 && instances < 8; ++trial) {
    const uint64_t seed = rng.next_u64();
    HeadConfig heads;
    std::vector<int> targets;
    const int combo = instances % 4;
    if (combo == 0) heads.n_classify = C;                       // stage a
    if (combo == 1) heads.n_clusters = 3;                       // stage b
    if (combo == 2) {                                           // stage c
      heads.n_clusters = 3;
      heads.n_layout = 2;
      heads.n_layout_classes = C + 1;
    }
    if (combo == 3) heads.n_classify = C + 1;                   // stage d head shape

    BranchNet net(tiny_net(), heads, seed);
    Rng drng(seed ^ 0xabcdef);
    const Tensor batch = random_batch(drng, 4, 8);
    auto labels = random_labels(drng, 4, 3, 2, C, combo == 2);
    if (combo == 0)
      for (auto& l : labels) l.class_id = std::max(1, l.class_id);
    targets.clear();
    for (const auto& l : labels)
      targets.push_back(combo == 0 ? l.class_id - 1 : l.class_id);

    auto loss_fn = [&]() { return head_loss(net, batch, labels, targets, nullptr); };
    auto analytic_fn = [&]() {
      net.zero_grads();
      HeadGrads grads;
      const double total = head_loss(net, batch, labels, targets, &grads);
      net.trunk_backward(net.heads_backward(grads));
      return total;
    };
    const FdStats st = fd_check(net.params(), loss_fn, analytic_fn);
    REQUIRE(!st.real_bug);
    REQUIRE(st.checked > 100);
    // Count only instances where every parameter passed at the primary eps.
    if (st.primary_failures == 0) ++instances;
  }
  CHECK(instances == 8);
}

TEST_CASE("joint concat head gradients match finite differences") {
  Rng rng(515);
  const NetConfig cfg = tiny_net();
  for (int inst = 0; inst < 2; ++inst) {
    BranchNet b1(cfg, HeadConfig{}, 100 + inst);
    BranchNet b2(cfg, HeadConfig{}, 200 + inst);
    Dense head("joint_head", 12, 5);
    Rng hr(300 + inst);
    head.init(hr);

    const Tensor x1 = random_batch(rng, 3, 8);
    const Tensor x2 = random_batch(rng, 3, 8);
    const std::vector<int> targets = {0, 3, 4};


    auto loss_fn = [&]() {
      const Tensor f = concat_features({b1.features(x1), b2.features(x2)});
      Tensor logits = head.forward(f);
      return loss_classify(softmax_rows(logits), targets, &logits).value;
    };
    auto analytic_fn = [&]() {
      b1.zero_grads();
      b2.zero_grads();
      head.weight.zero_grad();
      head.bias.zero_grad();
      const Tensor f = concat_features({b1.features(x1), b2.features(x2)});
      Tensor logits = head.forward(f);
      const ClassifyLossResult cl = loss_classify(softmax_rows(logits), targets, &logits);
      const Tensor df = head.backward(cl.d_logits);
      auto parts = split_features(df, {6, 6});
      b1.trunk_backward(parts[0]);
      b2.trunk_backward(parts[1]);
      return cl.value;
    };
    std::vector<Param*> params;
    for (Param* p : b1.trunk_params()) params.push_back(p);
    for (Param* p : b2.trunk_params()) params.push_back(p);
    params.push_back(&head.weight);
    params.push_back(&head.bias);
    const FdStats st = fd_check(params, loss_fn, analytic_fn);
    CHECK(!st.real_bug);
  }
}

TEST_CASE("regression masking is bitwise") {
  Rng rng(808);
  HeadConfig heads;
  heads.n_clusters = 4;
  BranchNet net(tiny_net(), heads, 11);
  const Tensor batch = random_batch(rng, 5, 8);
  auto labels = random_labels(rng, 5, 4, 0, 4, true);

  const Tensor feats = net.features(batch);
  HeadOutputs out = net.heads_forward(feats);

  auto grads_for = [&](const Tensor& loc_pred) {
    const WindowObjectLossResult wo =
        loss_window_object(out.cluster_post, loc_pred, labels, &out.cluster_logits);
    net.zero_grads();
    HeadGrads g;
    g.d_cluster_logits = wo.d_cluster_logits;
    g.d_loc_pred = wo.d_loc_pred;
    net.trunk_backward(net.heads_backward(g));
    std::vector<AlignedVec> param_grads;
    for (Param* p : net.params()) param_grads.push_back(p->grad);
    return std::make_pair(wo.cls + wo.loc, param_grads);
  };

  const auto base = grads_for(out.loc_pred);
  Tensor perturbed = out.loc_pred;
  const int N = heads.n_clusters;
  for (int i = 0; i < 5; ++i) {
    const int true_row = labels[i].cluster_id - 1;
    for (int n = 0; n < N; ++n) {
      if (n == true_row) continue;
      for (int k = 0; k < 4; ++k)
        perturbed.data[(size_t(i) * N + n) * 4 + k] += rng.uniform(-100, 100);
    }
  }
  const auto poked = grads_for(perturbed);
  CHECK(base.first == poked.first);
  REQUIRE(base.second.size() == poked.second.size());
  for (size_t p = 0; p < base.second.size(); ++p) CHECK(base.second[p] == poked.second[p]);
}

TEST_CASE("sgd momentum update") {
  Param p;
  p.name = "w";
  p.value = {1.0};
  p.grad = {0.0};
  SgdOptimizer opt(0.0);

  // lr 0 leaves parameters unchanged.
  p.grad[0] = 3.0;
  opt.step({&p}, 0.0);
  CHECK(p.value[0] == 1.0);

  // Quadratic f(w) = w^2/2, grad = w, momentum 0: hand-iterated descent.
  double w = 1.0;
  Param q;
  q.name = "q";
  q.value = {1.0};
  q.grad = {0.0};
  SgdOptimizer opt2(0.0);
  const double lr = 0.1;
  for (int t = 0; t < 5; ++t) {
    q.grad[0] = q.value[0];
    opt2.step({&q}, lr);
    w = w - lr * w;
  }
  CHECK(q.value[0] == doctest::Approx(w).epsilon(1e-15));

  // Momentum: v = m*v - lr*g; p += v.
  Param r;
  r.name = "r";
  r.value = {0.0};
  r.grad = {1.0};
  SgdOptimizer opt3(0.9);
  opt3.step({&r}, 0.1);
  CHECK(r.value[0] == doctest::Approx(-0.1).epsilon(1e-15));
  r.grad = {1.0};
  opt3.step({&r}, 0.1);
  CHECK(r.value[0] == doctest::Approx(-0.1 - 0.19).epsilon(1e-12));

  // Non-finite gradient aborts.
  Param bad;
  bad.name = "bad";
  bad.value = {0.0};
  bad.grad = {std::nan("")};
  SgdOptimizer opt4(0.9);
  CHECK_THROWS_AS(opt4.step({&bad}, 0.1), NumericalError);
}

TEST_CASE("concat_features ordering contract") {
  Tensor a({2, 3}), b({2, 5});
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] = double(i);
  for (size_t i = 0; i < b.data.size(); ++i) b.data[i] = 100.0 + double(i);

  const Tensor single = concat_features({a});
  CHECK(single.data == a.data);

  const Tensor ab = concat_features({a, b});
  REQUIRE(ab.shape == std::vector<int>{2, 8});
  CHECK(ab.data[0] == 0.0);
  CHECK(ab.data[3] == 100.0);
  CHECK(ab.data[8] == 3.0);

  const Tensor ba = concat_features({b, a});
  CHECK(ab.data != ba.data);

  Tensor c({3, 2});
  CHECK_THROWS_AS(concat_features({a, c}), std::invalid_argument);

  // split_features inverts concat.
  const auto parts = split_features(ab, {3, 5});
  CHECK(parts[0].data == a.data);
  CHECK(parts[1].data == b.data);
}

TEST_CASE("checkpoint round trip preserves parameters bitwise") {
  HeadConfig heads;
  heads.n_clusters = 3;
  heads.n_layout = 2;
  heads.n_layout_classes = 5;
  BranchNet net(tiny_net(), heads, 4242);
  const auto dir = std::filesystem::temp_directory_path() / "reldet_tests";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "ckpt_test.ckpt").string();
  CheckpointMeta meta{"b", 4242, CropSpec{45.0, 1.2}};
  save_branch_checkpoint(net, meta, path);

  CheckpointMeta back_meta;
  auto back = load_branch_checkpoint(path, &back_meta);
  CHECK(back_meta.stage == "b");
  CHECK(back_meta.crop.rotation_deg == 45.0);
  CHECK(back_meta.crop.scale == 1.2);
  auto src = net.params();
  auto dst = back->params();
  REQUIRE(src.size() == dst.size());
  for (size_t i = 0; i < src.size(); ++i) {
    CHECK(src[i]->name == dst[i]->name);
    CHECK(src[i]->value == dst[i]->value);
  }
}

TEST_CASE("short training loop is deterministic") {
  auto train_once = [&]() {
    Rng rng(99);
    HeadConfig heads;
    heads.n_classify = 4;
    BranchNet net(tiny_net(), heads, 31337);
    SgdOptimizer opt(0.9);
    for (int t = 0; t < 20; ++t) {
      const Tensor batch = random_batch(rng, 6, 8);
      std::vector<int> targets;
      for (int i = 0; i < 6; ++i) targets.push_back(int(rng.uniform_index(4)));
      net.zero_grads();
      const Tensor feats = net.features(batch);
      HeadOutputs out = net.heads_forward(feats);
      const ClassifyLossResult cl =
          loss_classify(out.classify_post, targets, &out.classify_logits);
      HeadGrads g;
      g.d_classify_logits = cl.d_logits;
      net.trunk_backward(net.heads_backward(g));
      opt.step(net.params(), 0.01);
    }
    std::vector<double> flat;
    for (Param* p : net.params()) flat.insert(flat.end(), p->value.begin(), p->value.end());
    return flat;
  };
  CHECK(train_once() == train_once());
}
