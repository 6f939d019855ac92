#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "reldet/labeling.hpp"
#include "reldet/rng.hpp"

using namespace reldet;

namespace {

// Single-exemplar-per-class cluster set for deterministic label checks.
WindowObjectClusters trivial_wo(int n_classes) {
  WindowObjectClusters wo;
  wo.per_class = true;
  int offset = 1;
  for (int c = 1; c <= n_classes; ++c) {
    ClusterModel m;
    m.exemplars = {RelLoc()};
    m.n_clusters = 1;
    m.converged = true;
    wo.class_ids.push_back(c);
    wo.offsets.push_back(offset);
    wo.models.push_back(std::move(m));
    offset += 1;
  }
  return wo;
}

ClusterModel layout_model(std::vector<RelLoc> exemplars) {
  ClusterModel m;
  m.kind = ClusterKind::layout;
  m.n_clusters = int(exemplars.size());
  m.exemplars = std::move(exemplars);
  m.converged = true;
  return m;
}

}  // namespace

TEST_CASE("match_gt: threshold and tie rules") {
  const std::vector<GtBox> gts = {{Box(10, 10, 10, 10), 1}, {Box(30, 10, 10, 10), 2}};
  auto m = match_gt(Box(10, 10, 10, 10), gts);
  REQUIRE(m.has_value());
  CHECK(m->class_id == 1);

  // IoU of (10,10,10,10) vs a copy shifted by d is (10-d)/(10+d); that
  // crosses 0.5 at d = 10/3. The threshold is a strict >= 0.5.
  const double d05 = 10.0 / 3.0;
  CHECK(match_gt(Box(10 + d05 - 1e-6, 10, 10, 10), gts).has_value());
  CHECK(!match_gt(Box(10 + d05 + 1e-6, 10, 10, 10), gts).has_value());
  // Max IoU 0.49 (d = 510/149) -> none.
  CHECK(!match_gt(Box(10 + 510.0 / 149.0, 10, 10, 10), gts).has_value());

  // Overlapping two gts: highest IoU wins (exhaustive scan oracle).
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const Box cand(rng.uniform(5, 35), rng.uniform(5, 15), rng.uniform(6, 18),
                   rng.uniform(6, 18));
    double best = 0.0;
    int best_i = -1;
    for (size_t i = 0; i < gts.size(); ++i) {
      const double v = iou(cand, gts[i].box);
      if (v > best) {
        best = v;
        best_i = int(i);
      }
    }
    auto got = match_gt(cand, gts);
    if (best >= 0.5) {
      REQUIRE(got.has_value());
      CHECK(got->class_id == gts[size_t(best_i)].class_id);
    } else {
      CHECK(!got.has_value());
    }
  }
}

TEST_CASE("make_label: single gt, candidate equals gt") {
  const std::vector<GtBox> gts = {{Box(20, 20, 12, 12), 3}};
  const WindowObjectClusters wo = trivial_wo(4);
  const ClusterModel lm = layout_model({RelLoc(0, -1, 0, 0), RelLoc(0, 1, 0, 0)});

  const SampleLabel label = make_label(gts[0].box, gts, wo, lm);
  CHECK(label.class_id == 3);
  CHECK(label.cluster_id == 3);  // class 3's single cluster at offset 3
  CHECK(label.loc_target.dx == 0.0);
  CHECK(label.loc_target.dy == 0.0);
  CHECK(label.loc_target.dw == 0.0);
  CHECK(label.loc_target.dh == 0.0);
  REQUIRE(label.layout_labels.size() == 2);
  CHECK(label.layout_labels[0] == 0);
  CHECK(label.layout_labels[1] == 0);
}

TEST_CASE("make_label: neighbor goes to its nearest layout cluster") {
  // Gt A (class 1), neighbor B (class 2) directly above A.
  const std::vector<GtBox> gts = {{Box(50, 50, 10, 10), 1}, {Box(50, 30, 10, 10), 2}};
  const WindowObjectClusters wo = trivial_wo(4);
  // Exemplar 0 points "neighbor above" (dy > 0 because dy = (y_s - y_g)/H_s),
  // exemplar 1 "neighbor below".
  const ClusterModel lm = layout_model({RelLoc(0, 2, 0, 0), RelLoc(0, -2, 0, 0)});

  const SampleLabel label = make_label(gts[0].box, gts, wo, lm);
  CHECK(label.class_id == 1);
  REQUIRE(label.layout_labels.size() == 2);
  // rel_loc(A, B) = (0, (50-30)/10, 0, 0) = (0, 2, 0, 0) -> cluster 0.
  CHECK(label.layout_labels[0] == 2);
  CHECK(label.layout_labels[1] == 0);

  // Nearest-exemplar scan oracle over both neighbors.
  const std::vector<GtBox> gts3 = {{Box(50, 50, 10, 10), 1},
                                   {Box(50, 30, 10, 10), 2},
                                   {Box(50, 28, 10, 10), 4}};
  const SampleLabel l3 = make_label(gts3[0].box, gts3, wo, lm);
  // Both neighbors map to cluster 0; class 2 is closer to the exemplar
  // ((0,2) exactly) than class 4 ((0,2.2)); smaller distance wins.
  CHECK(l3.layout_labels[0] == 2);
}

TEST_CASE("make_label: background candidate sees all gts as neighbors") {
  const std::vector<GtBox> gts = {{Box(20, 60, 10, 10), 1}};
  const WindowObjectClusters wo = trivial_wo(4);
  const ClusterModel lm = layout_model({RelLoc(0, -4, 0, 0), RelLoc(0, 4, 0, 0)});
  // Far-away candidate, IoU 0 -> background; gt below it at dy=(20-60)/10=-4.
  const SampleLabel label = make_label(Box(20, 20, 10, 10), gts, wo, lm);
  CHECK(label.class_id == 0);
  CHECK(label.cluster_id == 0);
  CHECK(label.layout_labels[0] == 1);
  CHECK(label.layout_labels[1] == 0);
}

TEST_CASE("gen_proposals: counts, determinism, degenerate jitter") {
  const std::vector<Box> gts = {Box(30, 30, 20, 20), Box(70, 60, 16, 16)};
  ProposalConfig cfg;
  cfg.n_jitter = 5;
  cfg.n_random = 3;

  const auto p1 = gen_proposals(gts, 99, cfg, 96);
  CHECK(p1.size() == 2 * 5 + 3);
  const auto p2 = gen_proposals(gts, 99, cfg, 96);
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].x == p2[i].x);
    CHECK(p1[i].w == p2[i].w);
  }
  for (const Box& b : p1) {
    CHECK(b.x >= 0.0);
    CHECK(b.x <= 96.0);
    CHECK(b.y >= 0.0);
    CHECK(b.y <= 96.0);
    CHECK(b.w > 0.0);
  }

  ProposalConfig zero;
  zero.n_jitter = 0;
  zero.n_random = 0;
  CHECK(gen_proposals(gts, 1, zero, 96).empty());

  ProposalConfig degenerate;
  degenerate.n_jitter = 4;
  degenerate.n_random = 0;
  degenerate.center_jitter = 0.0;
  degenerate.log_scale_jitter = 0.0;
  for (const Box& b : gen_proposals({gts[0]}, 1, degenerate, 96)) {
    CHECK(b.x == doctest::Approx(gts[0].x));
    CHECK(b.y == doctest::Approx(gts[0].y));
    CHECK(b.w == doctest::Approx(gts[0].w));
    CHECK(b.h == doctest::Approx(gts[0].h));
  }
}

TEST_CASE("gen_proposals: jitter keeps a healthy positive supply") {
  ProposalConfig cfg;
  cfg.n_jitter = 20;
  cfg.n_random = 0;
  Rng rng(17);
  int positive = 0, total = 0;
  for (int t = 0; t < 200; ++t) {
    const double s = rng.uniform(12, 40);
    const Box gt(rng.uniform(s / 2, 96 - s / 2), rng.uniform(s / 2, 96 - s / 2), s, s);
    for (const Box& b : gen_proposals({gt}, 1000 + t, cfg, 96)) {
      positive += iou(b, gt) >= 0.5 ? 1 : 0;
      ++total;
    }
  }
  CHECK(double(positive) / total >= 0.3);
}

TEST_CASE("label_dataset: type invariants hold on generated data") {
  DatasetConfig dcfg;
  dcfg.n_scenes = 40;
  dcfg.seed = 5;
  const Dataset ds = generate(dcfg);

  const WindowObjectClusters wo = trivial_wo(4);
  const ClusterModel lm = layout_model({RelLoc(0, 1, 0, 0), RelLoc(0, -1, 0, 0), RelLoc(1, 0, 0, 0)});
  ProposalConfig pcfg;
  const LabeledDataset lds = label_dataset(ds, wo, lm, pcfg, 77, 2);

  CHECK(lds.n_layout == 3);
  CHECK(lds.n_clusters == 4);
  int positives = 0;
  for (const Candidate& c : lds.candidates) {
    CHECK((c.label.class_id == 0) == (c.label.cluster_id == 0));
    CHECK(int(c.label.layout_labels.size()) == lds.n_layout);
    for (int v : c.label.layout_labels) {
      CHECK(v >= 0);
      CHECK(v <= 4);
    }
    if (c.label.class_id > 0) {
      ++positives;
      for (int k = 0; k < 4; ++k) CHECK(std::isfinite(c.label.loc_target[k]));
      // Round trip: applying the loc target recovers the matched gt.
      const Box gt = apply_rel_loc(c.box, c.label.loc_target);
      CHECK(iou(gt, c.box) >= 0.5 - 1e-9);
    }
    if (c.is_gt) CHECK(c.label.class_id > 0);
  }
  CHECK(positives > 0);

  // Pure function: relabeling a candidate gives the identical result.
  const Candidate& probe = lds.candidates[lds.candidates.size() / 2];
  const Scene* sc = nullptr;
  for (const Scene& s : ds.scenes)
    if (s.id == probe.scene_id) sc = &s;
  REQUIRE(sc != nullptr);
  const SampleLabel again = make_label(probe.box, scene_gts(*sc), wo, lm);
  CHECK(again.class_id == probe.label.class_id);
  CHECK(again.cluster_id == probe.label.cluster_id);
  CHECK(again.layout_labels == probe.label.layout_labels);
}

TEST_CASE("labels jsonl round trip") {
  DatasetConfig dcfg;
  dcfg.n_scenes = 6;
  dcfg.seed = 15;
  const Dataset ds = generate(dcfg);
  const WindowObjectClusters wo = trivial_wo(4);
  const ClusterModel lm = layout_model({RelLoc(0, 1, 0, 0)});
  ProposalConfig pcfg;
  const LabeledDataset lds = label_dataset(ds, wo, lm, pcfg, 8, 1);

  const auto path =
      (std::filesystem::temp_directory_path() / "reldet_tests" / "labels.jsonl").string();
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  save_labels_jsonl(lds, path);
  const LabeledDataset back = load_labels_jsonl(path);
  REQUIRE(back.candidates.size() == lds.candidates.size());
  CHECK(back.n_clusters == lds.n_clusters);
  CHECK(back.n_layout == lds.n_layout);
  for (size_t i = 0; i < lds.candidates.size(); ++i) {
    CHECK(back.candidates[i].box.x == lds.candidates[i].box.x);
    CHECK(back.candidates[i].label.class_id == lds.candidates[i].label.class_id);
    CHECK(back.candidates[i].label.cluster_id == lds.candidates[i].label.cluster_id);
    CHECK(back.candidates[i].label.loc_target.dw == lds.candidates[i].label.loc_target.dw);
    CHECK(back.candidates[i].label.layout_labels == lds.candidates[i].label.layout_labels);
  }
}
