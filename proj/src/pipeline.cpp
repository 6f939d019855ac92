#include "reldet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "reldet/losses.hpp"
#include "reldet/parallel.hpp"

namespace reldet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string RunPaths::clusters() const { return run_dir + "/clusters.json"; }
std::string RunPaths::labels(bool clustered) const {
  return run_dir + (clustered ? "/labels.jsonl" : "/labels_nocluster.jsonl");
}
std::string RunPaths::branch_ckpt(const std::string& stage, const CropSpec& spec) const {
  return run_dir + "/ckpt_" + stage + "_" + crop_spec_tag(spec) + ".ckpt";
}
std::string RunPaths::joint_head() const { return run_dir + "/joint_head.bin"; }
std::string RunPaths::features_bin() const { return run_dir + "/features.bin"; }
std::string RunPaths::features_meta() const { return run_dir + "/features_meta.jsonl"; }
std::string RunPaths::svms() const { return run_dir + "/svms.json"; }
std::string RunPaths::bbox() const { return run_dir + "/bbox.json"; }
std::string RunPaths::detections() const { return run_dir + "/detections.jsonl"; }
std::string RunPaths::eval_dir() const { return run_dir + "/eval"; }

uint64_t derive_seed(uint64_t master, const std::string& purpose) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h ^ (master * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
}

// ---------------------------------------------------------------------------
// Clustering + labels
// ---------------------------------------------------------------------------

ClusterArtifacts run_cluster(const RunConfig& cfg, const Dataset& train, const RunPaths& paths,
                             bool use_clustering) {
  const uint64_t label_seed = derive_seed(cfg.seed, "labels");
  const std::vector<uint64_t> seeds = scene_proposal_seeds(label_seed, train.scenes.size());

  std::vector<std::pair<int, RelLoc>> wo_points;
  std::vector<RelLoc> layout_points;
  for (size_t i = 0; i < train.scenes.size(); ++i) {
    const Scene& sc = train.scenes[i];
    const std::vector<GtBox> gts = scene_gts(sc);
    std::vector<Box> gt_boxes;
    for (const GtBox& g : gts) gt_boxes.push_back(g.box);

    std::vector<Box> candidates = gt_boxes;
    for (const Box& b : gen_proposals(gt_boxes, seeds[i], cfg.proposals, sc.size))
      candidates.push_back(b);
    for (const Box& c : candidates) {
      const auto m = match_gt(c, gts);
      if (m) wo_points.push_back({m->class_id, rel_loc(c, m->box)});
    }
    for (size_t a = 0; a < gts.size(); ++a)
      for (size_t b = 0; b < gts.size(); ++b)
        if (a != b) layout_points.push_back(rel_loc(gts[a].box, gts[b].box));
  }
  if (wo_points.empty())
    throw std::runtime_error("run_cluster: no candidate matched any ground truth");

  ApOptions opts;
  opts.damping = cfg.cluster.damping;
  opts.max_iter = cfg.cluster.max_iter;
  opts.stable_iter = cfg.cluster.stable_iter;
  opts.preference = cfg.cluster.preference;

  ClusterArtifacts art;
  if (use_clustering) {
    art.wo = fit_window_object_clusters(wo_points, opts, cfg.cluster.min_per_class,
                                        cfg.cluster.max_points_per_fit, cfg.cluster.wo_target_lo,
                                        cfg.cluster.wo_target_hi);
  } else {
    // Single regressor per class: one exemplar at the class mean.
    std::map<int, std::pair<RelLoc, int>> sums;
    for (const auto& [c, p] : wo_points) {
      auto& [sum, n] = sums[c];
      for (int k = 0; k < 4; ++k) sum[k] += p[k];
      n += 1;
    }
    art.wo.per_class = true;
    int offset = 1;
    for (const auto& [c, acc] : sums) {
      ClusterModel m;
      m.kind = ClusterKind::window_object;
      RelLoc mean = acc.first;
      for (int k = 0; k < 4; ++k) mean[k] /= acc.second;
      m.exemplars = {mean};
      m.n_clusters = 1;
      m.converged = true;
      m.damping = opts.damping;
      art.wo.class_ids.push_back(c);
      art.wo.offsets.push_back(offset);
      art.wo.models.push_back(std::move(m));
      offset += 1;
    }
  }

  ApOptions lopts = opts;
  lopts.kind = ClusterKind::layout;
  if (layout_points.empty()) {
    ClusterModel m;
    m.kind = ClusterKind::layout;
    m.exemplars = {RelLoc()};
    m.n_clusters = 1;
    m.converged = true;
    art.layout = std::move(m);
  } else {
    // Deterministic stride subsample before the sweep.
    std::vector<RelLoc> pts;
    const int cap = cfg.cluster.max_points_per_fit;
    if (int(layout_points.size()) <= cap) {
      pts = layout_points;
    } else {
      const double step = double(layout_points.size()) / cap;
      for (int i = 0; i < cap; ++i) pts.push_back(layout_points[size_t(i * step)]);
    }
    art.layout = ap_cluster_target_range(pts, lopts, cfg.cluster.layout_target_lo,
                                         cfg.cluster.layout_target_hi);
  }

  fs::create_directories(paths.run_dir);
  json j{{"window_object", json::parse(window_object_clusters_to_json(art.wo))},
         {"layout", json::parse(cluster_model_to_json(art.layout))},
         {"use_clustering", use_clustering}};
  std::ofstream f(paths.clusters());
  f << j.dump(2) << "\n";
  return art;
}

ClusterArtifacts load_cluster_artifacts(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw PrereqError("missing clusters file " + path + "; run `cluster` first");
  json j = json::parse(f);
  ClusterArtifacts art;
  art.wo = window_object_clusters_from_json(j.at("window_object").dump());
  art.layout = cluster_model_from_json(j.at("layout").dump());
  return art;
}

LabeledDataset run_make_labels(const RunConfig& cfg, const Dataset& train,
                               const ClusterArtifacts& clusters, const RunPaths& paths,
                               bool clustered_name) {
  const uint64_t label_seed = derive_seed(cfg.seed, "labels");
  LabeledDataset lds = label_dataset(train, clusters.wo, clusters.layout, cfg.proposals,
                                     label_seed, cfg.effective_threads());
  fs::create_directories(paths.run_dir);
  save_labels_jsonl(lds, paths.labels(clustered_name));
  return lds;
}

// ---------------------------------------------------------------------------
// Stage training
// ---------------------------------------------------------------------------

namespace {

struct SceneIndex {
  std::map<int, const Scene*> by_id;
  explicit SceneIndex(const Dataset& ds) {
    for (const Scene& sc : ds.scenes) by_id[sc.id] = &sc;
  }
  const Scene& get(int id) const {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw std::runtime_error("scene id " + std::to_string(id) + " not in dataset");
    return *it->second;
  }
};

double stage_lr(double base, int t, int total) {
  return t < (2 * total) / 3 ? base : base * 0.1;
}

// Batch of candidate crops for one branch spec.
Tensor candidate_crop_batch(const SceneIndex& scenes, const std::vector<Candidate>& cands,
                            const std::vector<int>& idx, const CropSpec& spec, int input_size) {
  Tensor batch({int(idx.size()), input_size, input_size, 1});
  const size_t per = size_t(input_size) * input_size;
  for (size_t i = 0; i < idx.size(); ++i) {
    const Candidate& c = cands[size_t(idx[i])];
    const Image crop = sample_crop(scenes.get(c.scene_id).image, c.box, spec, input_size);
    std::copy(crop.data.begin(), crop.data.end(), batch.data.begin() + i * per);
  }
  return batch;
}

int dominant_class(const Scene& sc) {
  int best = sc.objects.empty() ? 1 : sc.objects[0].class_id;
  double best_area = sc.objects.empty() ? 0.0 : sc.objects[0].box.area();
  for (const SceneObject& o : sc.objects) {
    if (o.box.area() > best_area) {
      best_area = o.box.area();
      best = o.class_id;
    }
  }
  return best;
}

std::vector<int> sample_batch(Rng& rng, const std::vector<int>& pool, int batch) {
  std::vector<int> idx(batch);
  for (int i = 0; i < batch; ++i) idx[i] = pool[rng.uniform_index(pool.size())];
  return idx;
}

// At least min_fraction of the batch comes from `positives`.
std::vector<int> sample_balanced_batch(Rng& rng, const std::vector<int>& all,
                                       const std::vector<int>& positives, int batch,
                                       double min_fraction) {
  const int quota = positives.empty() ? 0 : int(std::floor(batch * min_fraction));
  std::vector<int> idx(batch);
  for (int i = 0; i < quota; ++i) idx[i] = positives[rng.uniform_index(positives.size())];
  for (int i = quota; i < batch; ++i) idx[i] = all[rng.uniform_index(all.size())];
  return idx;
}

void train_stage_a_branch(const RunConfig& cfg, const Dataset& train, const CropSpec& spec,
                          int iterations, double lr, const std::string& ckpt_path) {
  const StageHyper& hp = cfg.stages;
  const int S = hp.net.input_size;
  const int C = cfg.data.n_classes;

  HeadConfig heads;
  heads.n_classify = C;
  BranchNet net(hp.net, heads,
                derive_seed(cfg.seed, "stage_a_init_" + crop_spec_tag(spec)));

  // Whole-scene center crops, precomputed once per branch.
  const size_t per = size_t(S) * S;
  std::vector<double> crops(train.scenes.size() * per);
  std::vector<int> targets(train.scenes.size());
  for (size_t i = 0; i < train.scenes.size(); ++i) {
    const Scene& sc = train.scenes[i];
    const Box window(sc.size / 2.0, sc.size / 2.0, double(sc.size), double(sc.size));
    const Image crop = sample_crop(sc.image, window, spec, S);
    std::copy(crop.data.begin(), crop.data.end(), crops.begin() + i * per);
    targets[i] = dominant_class(sc) - 1;
  }

  Rng rng(derive_seed(cfg.seed, "stage_a_batches_" + crop_spec_tag(spec)));
  SgdOptimizer opt(hp.momentum);
  for (int t = 0; t < iterations; ++t) {
    Tensor batch({hp.batch, S, S, 1});
    std::vector<int> batch_targets(hp.batch);
    for (int i = 0; i < hp.batch; ++i) {
      const size_t k = rng.uniform_index(train.scenes.size());
      std::copy(crops.begin() + k * per, crops.begin() + (k + 1) * per,
                batch.data.begin() + size_t(i) * per);
      batch_targets[i] = targets[k];
    }
    net.zero_grads();
    const Tensor feats = net.features(batch);
    HeadOutputs out = net.heads_forward(feats);
    const ClassifyLossResult loss =
        loss_classify(out.classify_post, batch_targets, &out.classify_logits);
    HeadGrads grads;
    grads.d_classify_logits = loss.d_logits;
    net.trunk_backward(net.heads_backward(grads));
    opt.step(net.params(), stage_lr(lr, t, iterations));
  }

  CheckpointMeta meta{"a", cfg.seed, spec};
  save_branch_checkpoint(net, meta, ckpt_path);
}

void train_stage_bc_branch(const RunConfig& cfg, const Dataset& train,
                           const LabeledDataset& labels, const CropSpec& spec, bool with_layout,
                           int iterations, double lr, const std::string& init_ckpt,
                           const std::string& ckpt_path) {
  const StageHyper& hp = cfg.stages;
  const int S = hp.net.input_size;
  const SceneIndex scenes(train);
  const std::string stage_tag = with_layout ? "c" : "b";

  std::vector<int> positives, all;
  for (size_t i = 0; i < labels.candidates.size(); ++i) {
    all.push_back(int(i));
    if (labels.candidates[i].label.cluster_id > 0) positives.push_back(int(i));
  }
  if (positives.empty())
    throw std::runtime_error("stage " + stage_tag + ": no positive candidates in labels");

  CheckpointMeta init_meta;
  auto init_net = load_branch_checkpoint(init_ckpt, &init_meta);

  HeadConfig heads;
  heads.n_clusters = labels.n_clusters;
  if (with_layout) {
    heads.n_layout = labels.n_layout;
    heads.n_layout_classes = labels.n_classes + 1;
  }
  BranchNet net(hp.net, heads,
                derive_seed(cfg.seed, "stage_" + stage_tag + "_init_" + crop_spec_tag(spec)));
  {
    auto src = init_net->trunk_params();
    auto dst = net.trunk_params();
    for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  }

  Rng rng(derive_seed(cfg.seed, "stage_" + stage_tag + "_batches_" + crop_spec_tag(spec)));
  SgdOptimizer opt(hp.momentum);
  for (int t = 0; t < iterations; ++t) {
    // Stage b supervises only matched candidates, so its batches draw from
    // positives alone; stage c adds layout supervision over everything.
    const std::vector<int> idx =
        with_layout
            ? sample_balanced_batch(rng, all, positives, hp.batch, hp.min_positive_fraction)
            : sample_batch(rng, positives, hp.batch);
    std::vector<SampleLabel> batch_labels;
    batch_labels.reserve(idx.size());
    for (int i : idx) batch_labels.push_back(labels.candidates[size_t(i)].label);

    const Tensor batch = candidate_crop_batch(scenes, labels.candidates, idx, spec, S);
    net.zero_grads();
    const Tensor feats = net.features(batch);
    HeadOutputs out = net.heads_forward(feats);

    const WindowObjectLossResult wo =
        loss_window_object(out.cluster_post, out.loc_pred, batch_labels, &out.cluster_logits);
    HeadGrads grads;
    grads.d_cluster_logits = wo.d_cluster_logits;
    grads.d_loc_pred = wo.d_loc_pred;
    if (with_layout) {
      const LayoutLossResult lay = loss_layout(out.layout_post, batch_labels, &out.layout_logits);
      grads.d_layout_logits = lay.d_layout_logits;
    }
    net.trunk_backward(net.heads_backward(grads));
    opt.step(net.params(), stage_lr(lr, t, iterations));
  }

  CheckpointMeta meta{stage_tag, cfg.seed, spec};
  save_branch_checkpoint(net, meta, ckpt_path);
}

void train_stage_d(const RunConfig& cfg, const Dataset& train, const LabeledDataset& labels,
                   const std::vector<CropSpec>& specs, const std::vector<std::string>& init_ckpts,
                   bool random_init, int iterations, double lr, const RunPaths& paths,
                   int threads) {
  const StageHyper& hp = cfg.stages;
  const int S = hp.net.input_size;
  const int C = cfg.data.n_classes;
  const SceneIndex scenes(train);

  std::vector<int> positives, all;
  for (size_t i = 0; i < labels.candidates.size(); ++i) {
    all.push_back(int(i));
    if (labels.candidates[i].label.class_id > 0) positives.push_back(int(i));
  }

  std::vector<std::unique_ptr<BranchNet>> nets;
  for (size_t b = 0; b < specs.size(); ++b) {
    auto net = std::make_unique<BranchNet>(
        hp.net, HeadConfig{},
        derive_seed(cfg.seed, "stage_d_init_" + crop_spec_tag(specs[b])));
    if (!random_init) {
      CheckpointMeta meta;
      auto init_net = load_branch_checkpoint(init_ckpts[b], &meta);
      auto src = init_net->trunk_params();
      auto dst = net->trunk_params();
      for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    }
    nets.push_back(std::move(net));
  }

  const int concat_dim = int(specs.size()) * hp.net.feature_dim;
  Dense head("joint_head", concat_dim, C + 1);
  {
    Rng hr(derive_seed(cfg.seed, "stage_d_head"));
    head.init(hr);
  }

  std::vector<Param*> all_params;
  for (auto& net : nets)
    for (Param* p : net->trunk_params()) all_params.push_back(p);
  all_params.push_back(&head.weight);
  all_params.push_back(&head.bias);

  std::vector<int> dims(specs.size(), hp.net.feature_dim);
  Rng rng(derive_seed(cfg.seed, "stage_d_batches"));
  SgdOptimizer opt(hp.momentum);

  for (int t = 0; t < iterations; ++t) {
    const std::vector<int> idx =
        sample_balanced_batch(rng, all, positives, hp.batch, hp.min_positive_fraction);
    std::vector<int> targets;
    targets.reserve(idx.size());
    for (int i : idx) targets.push_back(labels.candidates[size_t(i)].label.class_id);

    for (auto& net : nets) net->zero_grads();
    head.weight.zero_grad();
    head.bias.zero_grad();

    std::vector<Tensor> branch_feats(specs.size());
    parallel_for(specs.size(), threads, [&](size_t b) {
      const Tensor batch = candidate_crop_batch(scenes, labels.candidates, idx, specs[b], S);
      branch_feats[b] = nets[b]->features(batch);
    });

    const Tensor concat = concat_features(branch_feats);
    Tensor logits = head.forward(concat);
    const Tensor post = softmax_rows(logits);
    const ClassifyLossResult loss = loss_classify(post, targets, &logits);

    const Tensor d_concat = head.backward(loss.d_logits);
    std::vector<Tensor> parts = split_features(d_concat, dims);
    parallel_for(specs.size(), threads, [&](size_t b) { nets[b]->trunk_backward(parts[b]); });

    opt.step(all_params, stage_lr(lr, t, iterations));
  }

  for (size_t b = 0; b < specs.size(); ++b) {
    CheckpointMeta meta{"d", cfg.seed, specs[b]};
    save_branch_checkpoint(*nets[b], meta, paths.branch_ckpt("d", specs[b]));
  }
  json extra{{"n_classes", C}, {"feature_dim", hp.net.feature_dim}};
  save_joint_head(head, extra, paths.joint_head());
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::a_pretrain: return "a";
    case Stage::b_window_object: return "b";
    case Stage::c_multi_object: return "c";
    case Stage::d_finetune: return "d";
    case Stage::svm: return "svm";
  }
  return "?";
}

// Resolve the init checkpoint for one branch, honoring the stage ordering:
// b needs a, c needs b, d takes the latest of c/b/a unless overridden.
std::string resolve_init(const RunPaths& run_paths, const std::string& init_dir, Stage stage,
                         InitFrom init, const CropSpec& spec, bool* random_init) {
  *random_init = false;
  RunPaths paths = run_paths;
  if (!init_dir.empty()) paths.run_dir = init_dir;
  auto existing = [&](const std::string& st) {
    const std::string p = paths.branch_ckpt(st, spec);
    return fs::exists(p) ? p : std::string();
  };
  auto require = [&](const std::string& st) {
    const std::string p = existing(st);
    if (p.empty())
      throw PrereqError("stage " + stage_name(stage) + " requires the stage-" + st +
                        " checkpoint " + paths.branch_ckpt(st, spec) +
                        "; run `train --stage " + st + "` first");
    return p;
  };
  switch (init) {
    case InitFrom::random:
      if (stage != Stage::d_finetune)
        throw UsageError("random init is only supported for stage d");
      *random_init = true;
      return {};
    case InitFrom::stage_a: return require("a");
    case InitFrom::stage_b: return require("b");
    case InitFrom::stage_c: return require("c");
    case InitFrom::none: break;
  }
  switch (stage) {
    case Stage::a_pretrain:
      return {};
    case Stage::b_window_object:
      return require("a");
    case Stage::c_multi_object:
      return require("b");
    case Stage::d_finetune: {
      for (const char* st : {"c", "b", "a"}) {
        const std::string p = existing(st);
        if (!p.empty()) return p;
      }
      throw PrereqError("stage d requires a stage a, b or c checkpoint for branch " +
                        crop_spec_tag(spec) + "; run `train --stage a` first");
    }
    case Stage::svm:
      break;
  }
  throw UsageError("resolve_init: unsupported stage");
}

}  // namespace

std::vector<std::string> run_stage(const RunConfig& cfg, const StagePlan& plan,
                                   const Dataset& train, const LabeledDataset* labels,
                                   const RunPaths& paths) {
  fs::create_directories(paths.run_dir);
  const StageHyper& hp = cfg.stages;
  const double lr = plan.lr > 0 ? plan.lr : hp.lr;
  const int threads = cfg.effective_threads();
  if (plan.crop_specs.empty()) throw UsageError("run_stage: no crop specs in plan");

  int iterations = plan.iterations;
  if (iterations < 0) {
    switch (plan.stage) {
      case Stage::a_pretrain: iterations = hp.iters_a; break;
      case Stage::b_window_object: iterations = hp.iters_b; break;
      case Stage::c_multi_object: iterations = hp.iters_c; break;
      case Stage::d_finetune: iterations = hp.iters_d; break;
      default: throw UsageError("run_stage: bad stage");
    }
  }

  const bool needs_labels = plan.stage != Stage::a_pretrain;
  if (needs_labels && labels == nullptr)
    throw PrereqError("stage " + stage_name(plan.stage) + " requires labels; run `make-labels`");

  std::vector<std::string> out_paths;
  if (plan.stage == Stage::d_finetune) {
    bool random_init = false;
    std::vector<std::string> inits;
    for (const CropSpec& spec : plan.crop_specs)
      inits.push_back(
          resolve_init(paths, plan.init_dir, plan.stage, plan.init_from, spec, &random_init));
    train_stage_d(cfg, train, *labels, plan.crop_specs, inits, random_init, iterations, lr,
                  paths, threads);
    for (const CropSpec& spec : plan.crop_specs)
      out_paths.push_back(paths.branch_ckpt("d", spec));
    out_paths.push_back(paths.joint_head());
    return out_paths;
  }

  // Stages a-c train each branch independently; parallel across branches.
  std::vector<std::string> inits(plan.crop_specs.size());
  for (size_t b = 0; b < plan.crop_specs.size(); ++b) {
    bool random_init = false;
    inits[b] = resolve_init(paths, plan.init_dir, plan.stage, plan.init_from, plan.crop_specs[b],
                            &random_init);
  }
  out_paths.resize(plan.crop_specs.size());
  parallel_for(plan.crop_specs.size(), threads, [&](size_t b) {
    const CropSpec& spec = plan.crop_specs[b];
    const std::string ckpt = paths.branch_ckpt(stage_name(plan.stage), spec);
    switch (plan.stage) {
      case Stage::a_pretrain:
        train_stage_a_branch(cfg, train, spec, iterations, lr, ckpt);
        break;
      case Stage::b_window_object:
        train_stage_bc_branch(cfg, train, *labels, spec, /*with_layout=*/false, iterations, lr,
                              inits[b], ckpt);
        break;
      case Stage::c_multi_object:
        train_stage_bc_branch(cfg, train, *labels, spec, /*with_layout=*/true, iterations, lr,
                              inits[b], ckpt);
        break;
      default:
        break;
    }
    out_paths[b] = ckpt;
  });
  return out_paths;
}

BranchSet load_stage_branches(const RunPaths& paths, const std::string& stage,
                              const std::vector<CropSpec>& specs) {
  BranchSet bs;
  bs.specs = specs;
  for (const CropSpec& spec : specs) {
    const std::string p = paths.branch_ckpt(stage, spec);
    if (!fs::exists(p))
      throw PrereqError("missing checkpoint " + p + "; run `train --stage " + stage + "` first");
    bs.nets.push_back(load_branch_checkpoint(p, nullptr));
  }
  return bs;
}

// ---------------------------------------------------------------------------
// Features, SVM, bbox regression
// ---------------------------------------------------------------------------

FeatureExtraction run_extract_features(const RunConfig& cfg, const Dataset& train,
                                       const LabeledDataset& labels, BranchSet& branches,
                                       const RunPaths& paths) {
  const int C = cfg.data.n_classes;
  const SceneIndex scenes(train);

  // Selection: every gt box, high-overlap positives (bbox regression), and a
  // per-scene cap of pure-background candidates.
  struct ScenePick {
    int scene_id;
    std::vector<int> cand_idx;
  };
  std::vector<ScenePick> picks;
  {
    std::map<int, int> bg_count;
    std::map<int, size_t> pick_of_scene;
    for (size_t i = 0; i < labels.candidates.size(); ++i) {
      const Candidate& c = labels.candidates[i];
      const Scene& sc = scenes.get(c.scene_id);
      bool take = false;
      if (c.is_gt) {
        take = true;
      } else if (c.label.class_id > 0) {
        const Box gt = apply_rel_loc(c.box, c.label.loc_target);
        take = iou(c.box, gt) >= cfg.detect.bbox_pos_iou;
      } else {
        double max_iou = 0.0;
        for (const SceneObject& o : sc.objects) max_iou = std::max(max_iou, iou(c.box, o.box));
        if (max_iou < 0.3 && bg_count[c.scene_id] < cfg.svm_neg_per_scene) {
          take = true;
          bg_count[c.scene_id] += 1;
        }
      }
      if (!take) continue;
      auto it = pick_of_scene.find(c.scene_id);
      if (it == pick_of_scene.end()) {
        pick_of_scene[c.scene_id] = picks.size();
        picks.push_back({c.scene_id, {int(i)}});
      } else {
        picks[it->second].cand_idx.push_back(int(i));
      }
    }
  }

  FeatureExtraction fx;
  fx.dim = branches.feature_dim();
  size_t total = 0;
  for (const auto& p : picks) total += p.cand_idx.size();
  fx.rows.reserve(total);
  std::vector<size_t> row_offset(picks.size());
  size_t off = 0;
  for (size_t s = 0; s < picks.size(); ++s) {
    row_offset[s] = off;
    off += picks[s].cand_idx.size();
    for (int i : picks[s].cand_idx) {
      const Candidate& c = labels.candidates[size_t(i)];
      FeatureExtraction::Row row;
      row.scene_id = c.scene_id;
      row.box = c.box;
      row.class_id = c.label.class_id;
      row.is_gt = c.is_gt;
      row.loc_target = c.label.loc_target;
      row.iou_per_class.assign(C + 1, 0.0);
      const Scene& sc = scenes.get(c.scene_id);
      for (const SceneObject& o : sc.objects)
        row.iou_per_class[o.class_id] =
            std::max(row.iou_per_class[o.class_id], iou(c.box, o.box));
      fx.rows.push_back(std::move(row));
    }
  }
  fx.features.assign(total * size_t(fx.dim), 0.0);

  const int threads = cfg.effective_threads();
  std::vector<BranchSet> worker_sets;
  worker_sets.reserve(threads);
  for (int t = 0; t < threads; ++t) worker_sets.push_back(clone_branch_set(branches));

  std::atomic<int> next_worker{0};
  parallel_for(picks.size(), threads, [&](size_t s) {
    thread_local int worker_id = -1;
    if (worker_id < 0) worker_id = next_worker.fetch_add(1) % threads;
    BranchSet& bs = worker_sets[size_t(worker_id)];
    const Scene& sc = scenes.get(picks[s].scene_id);
    std::vector<Box> boxes;
    for (int i : picks[s].cand_idx) boxes.push_back(labels.candidates[size_t(i)].box);
    const std::vector<double> feats = extract_scene_features(sc.image, boxes, bs);
    std::copy(feats.begin(), feats.end(), fx.features.begin() + row_offset[s] * size_t(fx.dim));
  });

  save_feature_extraction(fx, paths);
  return fx;
}

void save_feature_extraction(const FeatureExtraction& fx, const RunPaths& paths) {
  BlobFile f;
  f.header = json{{"kind", "features"}, {"n", fx.rows.size()}, {"dim", fx.dim}};
  f.blobs.push_back(fx.features);
  save_blob_file(f, paths.features_bin());

  std::ofstream meta(paths.features_meta());
  for (const auto& r : fx.rows) {
    json j{{"scene", r.scene_id},
           {"box", {r.box.x, r.box.y, r.box.w, r.box.h}},
           {"class_id", r.class_id},
           {"is_gt", r.is_gt},
           {"loc_target", {r.loc_target.dx, r.loc_target.dy, r.loc_target.dw, r.loc_target.dh}},
           {"iou_per_class", r.iou_per_class}};
    meta << j.dump() << "\n";
  }
}

FeatureExtraction load_feature_extraction(const RunPaths& paths) {
  if (!fs::exists(paths.features_bin()) || !fs::exists(paths.features_meta()))
    throw PrereqError("missing features in " + paths.run_dir + "; run `extract-features` first");
  BlobFile f = load_blob_file(paths.features_bin());
  FeatureExtraction fx;
  fx.dim = f.header.at("dim").get<int>();
  fx.features = std::move(f.blobs.at(0));

  std::ifstream meta(paths.features_meta());
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    FeatureExtraction::Row r;
    r.scene_id = j.at("scene").get<int>();
    const auto& b = j.at("box");
    r.box = Box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>());
    r.class_id = j.at("class_id").get<int>();
    r.is_gt = j.at("is_gt").get<bool>();
    const auto& t = j.at("loc_target");
    r.loc_target =
        RelLoc(t[0].get<double>(), t[1].get<double>(), t[2].get<double>(), t[3].get<double>());
    r.iou_per_class = j.at("iou_per_class").get<std::vector<double>>();
    fx.rows.push_back(std::move(r));
  }
  if (fx.rows.size() * size_t(fx.dim) != fx.features.size())
    throw std::runtime_error("load_feature_extraction: meta/blob size mismatch");
  return fx;
}

std::vector<LinearSvm> run_train_svms(const RunConfig& cfg, const FeatureExtraction& fx,
                                      const RunPaths& paths) {
  const int C = cfg.data.n_classes;
  std::vector<LinearSvm> svms(C + 1);
  const int threads = cfg.effective_threads();

  parallel_for(size_t(C), threads, [&](size_t ci) {
    const int c = int(ci) + 1;
    std::vector<int> pos, neg;
    for (size_t i = 0; i < fx.rows.size(); ++i) {
      const auto& r = fx.rows[i];
      if (r.is_gt && r.class_id == c) {
        pos.push_back(int(i));
      } else if (r.iou_per_class[c] < 0.3) {
        neg.push_back(int(i));
      }
    }
    if (pos.empty()) {
      std::fprintf(stderr, "train-svm: class %s has no positives, skipping\n", class_name(c));
      return;
    }
    const int n = int(pos.size() + neg.size());
    std::vector<double> xs(size_t(n) * fx.dim);
    std::vector<int> ys(n);
    int row = 0;
    for (int i : pos) {
      std::copy(fx.features.begin() + size_t(i) * fx.dim,
                fx.features.begin() + size_t(i + 1) * fx.dim, xs.begin() + size_t(row) * fx.dim);
      ys[row++] = 1;
    }
    for (int i : neg) {
      std::copy(fx.features.begin() + size_t(i) * fx.dim,
                fx.features.begin() + size_t(i + 1) * fx.dim, xs.begin() + size_t(row) * fx.dim);
      ys[row++] = -1;
    }
    svms[c] = train_svm(xs, n, fx.dim, ys, cfg.svm);
  });

  json j = json::array();
  for (int c = 0; c <= C; ++c) j.push_back(svm_to_json(svms[c]));
  std::ofstream f(paths.svms());
  f << json{{"dim", fx.dim}, {"models", j}}.dump() << "\n";
  return svms;
}

std::vector<LinearSvm> load_svms(const RunPaths& paths) {
  std::ifstream f(paths.svms());
  if (!f) throw PrereqError("missing " + paths.svms() + "; run `train-svm` first");
  json j = json::parse(f);
  std::vector<LinearSvm> svms;
  for (const auto& m : j.at("models")) svms.push_back(svm_from_json(m));
  return svms;
}

std::vector<BBoxRegressor> run_train_bbox(const RunConfig& cfg, const FeatureExtraction& fx,
                                          const RunPaths& paths) {
  const int C = cfg.data.n_classes;
  std::vector<BBoxRegressor> regs(C + 1);
  const int threads = cfg.effective_threads();

  parallel_for(size_t(C), threads, [&](size_t ci) {
    const int c = int(ci) + 1;
    std::vector<int> rows;
    for (size_t i = 0; i < fx.rows.size(); ++i) {
      const auto& r = fx.rows[i];
      if (r.class_id != c) continue;
      const Box gt = apply_rel_loc(r.box, r.loc_target);
      if (iou(r.box, gt) >= cfg.detect.bbox_pos_iou) rows.push_back(int(i));
    }
    if (rows.empty()) {
      std::fprintf(stderr, "train-bbox: class %s has no positives, skipping\n", class_name(c));
      return;
    }
    std::vector<double> xs(rows.size() * size_t(fx.dim));
    std::vector<RelLoc> targets;
    targets.reserve(rows.size());
    for (size_t k = 0; k < rows.size(); ++k) {
      std::copy(fx.features.begin() + size_t(rows[k]) * fx.dim,
                fx.features.begin() + size_t(rows[k] + 1) * fx.dim,
                xs.begin() + k * size_t(fx.dim));
      targets.push_back(fx.rows[size_t(rows[k])].loc_target);
    }
    regs[c] = train_bbox_regressor(xs, int(rows.size()), fx.dim, targets, cfg.detect.bbox_ridge);
  });

  json j = json::array();
  for (int c = 0; c <= C; ++c) j.push_back(bbox_regressor_to_json(regs[c]));
  std::ofstream f(paths.bbox());
  f << json{{"dim", fx.dim}, {"models", j}}.dump() << "\n";
  return regs;
}

std::vector<BBoxRegressor> load_bbox(const RunPaths& paths) {
  std::ifstream f(paths.bbox());
  if (!f) throw PrereqError("missing " + paths.bbox() + "; run `train-bbox` first");
  json j = json::parse(f);
  std::vector<BBoxRegressor> regs;
  for (const auto& m : j.at("models")) regs.push_back(bbox_regressor_from_json(m));
  return regs;
}

// ---------------------------------------------------------------------------
// Detection + evaluation
// ---------------------------------------------------------------------------

std::vector<Detection> run_detect(const RunConfig& cfg, const Dataset& test, BranchSet& branches,
                                  const std::vector<LinearSvm>& svms,
                                  const std::vector<BBoxRegressor>* regressors,
                                  const RunPaths& paths) {
  const int threads = cfg.effective_threads();
  const uint64_t detect_seed = derive_seed(cfg.seed, "detect");
  const std::vector<uint64_t> seeds = scene_proposal_seeds(detect_seed, test.scenes.size());

  std::vector<BranchSet> worker_sets;
  worker_sets.reserve(threads);
  for (int t = 0; t < threads; ++t) worker_sets.push_back(clone_branch_set(branches));

  std::vector<std::vector<Detection>> per_scene(test.scenes.size());
  std::atomic<int> next_worker{0};
  parallel_for(test.scenes.size(), threads, [&](size_t s) {
    thread_local int worker_id = -1;
    if (worker_id < 0) worker_id = next_worker.fetch_add(1) % threads;
    BranchSet& bs = worker_sets[size_t(worker_id)];

    const Scene& sc = test.scenes[s];
    std::vector<Box> gt_boxes;
    for (const SceneObject& o : sc.objects) gt_boxes.push_back(o.box);
    const std::vector<Box> proposals = gen_proposals(gt_boxes, seeds[s], cfg.proposals, sc.size);
    if (proposals.empty()) return;

    const std::vector<double> feats = extract_scene_features(sc.image, proposals, bs);
    std::vector<Detection> dets = score_features(sc.id, proposals, feats, bs.feature_dim(), svms);
    if (regressors && cfg.detect.refine) {
      // One detection per class per proposal, in proposal-major order.
      std::vector<int> prop_of_det;
      prop_of_det.reserve(dets.size());
      int present = 0;
      for (size_t c = 1; c < svms.size(); ++c) present += svms[c].present ? 1 : 0;
      for (size_t i = 0; i < proposals.size(); ++i)
        for (int k = 0; k < present; ++k) prop_of_det.push_back(int(i));
      refine_detections(dets, prop_of_det, feats, bs.feature_dim(), *regressors);
    }
    // Per-class NMS after refinement.
    std::vector<Detection> kept;
    for (size_t c = 1; c < svms.size(); ++c) {
      std::vector<Detection> class_dets;
      for (const Detection& d : dets)
        if (d.class_id == int(c)) class_dets.push_back(d);
      for (const Detection& d : nms(class_dets, cfg.detect.nms_iou)) kept.push_back(d);
    }
    per_scene[s] = std::move(kept);
  });

  std::vector<Detection> all;
  for (auto& v : per_scene)
    for (auto& d : v) all.push_back(d);
  fs::create_directories(paths.run_dir);
  save_detections_jsonl(all, paths.detections());
  return all;
}

EvalResult run_eval(const RunConfig& cfg, const Dataset& test, const std::vector<Detection>& dets,
                    const RunPaths& paths) {
  const EvalResult res = evaluate_detections(dets, test, cfg.eval_iou);
  write_eval_artifacts(res, paths.eval_dir());
  return res;
}

}  // namespace reldet
