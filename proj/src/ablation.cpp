#include "reldet/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace reldet {

namespace fs = std::filesystem;

std::vector<CropSpec> parse_branch_set(const std::string& name) {
  if (name == "s12") return {{0.0, 1.2}};
  if (name == "mc") return {{0.0, 0.8}, {0.0, 1.2}, {0.0, 1.8}, {0.0, 2.7}};
  if (name == "mcrot") return detection_crop_specs();
  if (name == "rot12") return {{0.0, 1.2}, {45.0, 1.2}, {90.0, 1.2}};
  throw UsageError("unknown branch set '" + name + "' (use s12, mc, mcrot, rot12)");
}

std::vector<AblationConfig> grid_configs(const std::string& grid) {
  const auto S12 = parse_branch_set("s12");
  const auto MC = parse_branch_set("mc");
  const auto MCROT = parse_branch_set("mcrot");
  const auto ROT12 = parse_branch_set("rot12");

  if (grid == "table1") {
    return {{"rcnn_baseline", "ad", S12},
            {"random_concat", "rd", MCROT},
            {"mcrot_no_rel", "ad", MCROT},
            {"full_s12", "abcd", S12},
            {"no_multiobj", "abd", MCROT},
            {"full", "abcd", MCROT}};
  }
  if (grid == "table2") {
    return {{"ad_s12", "ad", S12},
            {"abd_s12_nocluster", "abd", S12, /*cluster=*/false},
            {"abd_s12_cluster", "abd", S12}};
  }
  if (grid == "table3") {
    return {{"s12", "abd", S12},
            {"s12_08", "abd", {{0.0, 0.8}, {0.0, 1.2}}},
            {"s12_18", "abd", {{0.0, 1.2}, {0.0, 1.8}}},
            {"s12_27", "abd", {{0.0, 1.2}, {0.0, 2.7}}},
            {"s08_12_18", "abd", {{0.0, 0.8}, {0.0, 1.2}, {0.0, 1.8}}},
            {"s08_12_18_27", "abd", MC},
            {"shared", "abd", MC, /*cluster=*/true, /*shared_params=*/true}};
  }
  if (grid == "table4") {
    return {{"s12_r0", "abd", S12},
            {"s12_rot", "abd", ROT12},
            {"mc_r0", "abd", MC},
            {"mc_rot", "abd", MCROT}};
  }
  if (grid == "accept6") {
    return {{"ad_s12", "ad", S12},
            {"ad_mc", "ad", MC},
            {"ad_mcrot", "ad", MCROT},
            {"abd_mcrot", "abd", MCROT},
            {"abcd_mcrot", "abcd", MCROT}};
  }
  if (grid == "accept7") {
    return {{"abd_s12_cluster", "abd", S12},
            {"abd_s12_nocluster", "abd", S12, /*cluster=*/false}};
  }
  if (grid == "accept8") {
    return {{"mc_distinct", "abd", MC},
            {"mc_shared", "abd", MC, /*cluster=*/true, /*shared_params=*/true}};
  }
  if (grid == "smoke") {
    return {{"ad_s12", "ad", S12}, {"abd_s12", "abd", S12}};
  }
  throw UsageError("unknown ablation grid '" + grid + "'");
}

namespace {

// Branch specs a config trains in stages a-c (a shared-parameter config
// trains only the 1.2 branch and reuses it at every scale).
std::vector<CropSpec> trained_specs(const AblationConfig& c) {
  if (c.shared_params) return {{0.0, 1.2}};
  return c.specs;
}

struct Totals {
  double map = 0.0;
  double median_ap = 0.0;
};

Totals run_config_for_seed(const RunConfig& cfg, const AblationConfig& acfg,
                           const Dataset& train, const Dataset& test,
                           const std::string& shared_dir, const std::string& config_dir,
                           const LabeledDataset& labels) {
  RunPaths shared{shared_dir};
  RunPaths run{config_dir};
  fs::create_directories(config_dir);

  // Stage d (or directly from random init for the model-averaging baseline).
  StagePlan plan;
  plan.stage = Stage::d_finetune;
  plan.crop_specs = trained_specs(acfg);
  plan.init_dir = shared_dir;
  if (acfg.stages == "rd") {
    plan.init_from = InitFrom::random;
  } else if (acfg.has('c')) {
    plan.init_from = InitFrom::stage_c;
  } else if (acfg.has('b')) {
    plan.init_from = InitFrom::stage_b;
  } else {
    plan.init_from = InitFrom::stage_a;
  }
  run_stage(cfg, plan, train, &labels, run);

  // Detector branches: shared runs reuse the single trained net at all scales.
  BranchSet branches;
  if (acfg.shared_params) {
    auto base = load_branch_checkpoint(run.branch_ckpt("d", CropSpec{0.0, 1.2}), nullptr);
    branches.specs = acfg.specs;
    for (size_t i = 0; i < acfg.specs.size(); ++i) branches.nets.push_back(clone_net(*base));
  } else {
    branches = load_stage_branches(run, "d", acfg.specs);
  }

  const FeatureExtraction fx = run_extract_features(cfg, train, labels, branches, run);
  const std::vector<LinearSvm> svms = run_train_svms(cfg, fx, run);
  const std::vector<BBoxRegressor> regs = run_train_bbox(cfg, fx, run);
  const std::vector<Detection> dets = run_detect(cfg, test, branches, svms, &regs, run);
  const EvalResult res = run_eval(cfg, test, dets, run);
  return {res.map, res.median_ap};
}

}  // namespace

std::vector<AblationRow> run_ablate(const RunConfig& base_cfg, const std::string& grid,
                                    int n_seeds, const std::string& out_dir) {
  const std::vector<AblationConfig> configs = grid_configs(grid);
  fs::create_directories(out_dir);

  std::vector<AblationRow> rows(configs.size());
  for (size_t ci = 0; ci < configs.size(); ++ci) rows[ci].config = configs[ci].name;

  for (int k = 0; k < n_seeds; ++k) {
    RunConfig cfg = base_cfg;
    cfg.seed = base_cfg.seed + uint64_t(k);
    const std::string seed_dir = out_dir + "/seed" + std::to_string(k);

    // Data is generated once per seed and round-tripped through disk so the
    // ablation consumes exactly what the standalone subcommands would.
    const std::string train_dir = seed_dir + "/data_train";
    const std::string test_dir = seed_dir + "/data_test";
    save_dataset(generate(cfg.train_data_config()), train_dir);
    save_dataset(generate(cfg.test_data_config()), test_dir);
    const Dataset train = load_dataset(train_dir);
    const Dataset test = load_dataset(test_dir);

    // Shared artifacts: clusters, labels, and stage a/b/c checkpoints.
    const bool any_nocluster =
        std::any_of(configs.begin(), configs.end(), [](const auto& c) { return !c.cluster; });

    std::map<bool, LabeledDataset> labels_by_mode;
    std::map<bool, std::string> shared_by_mode;
    for (const bool mode : {true, false}) {
      if (!mode && !any_nocluster) continue;
      if (mode && std::none_of(configs.begin(), configs.end(),
                               [](const auto& c) { return c.cluster; }))
        continue;
      const std::string dir = seed_dir + (mode ? "/shared" : "/shared_nocluster");
      shared_by_mode[mode] = dir;
      RunPaths paths{dir};
      fs::create_directories(dir);
      const ClusterArtifacts art = run_cluster(cfg, train, paths, mode);
      labels_by_mode[mode] = run_make_labels(cfg, train, art, paths);
    }

    // Stage a: union of specs over configs that pretrain, per cluster mode.
    // The checkpoints do not depend on labels, so train once and copy.
    std::set<std::string> a_tags;
    std::vector<CropSpec> a_specs;
    for (const auto& c : configs) {
      if (!c.has('a')) continue;
      for (const CropSpec& s : trained_specs(c))
        if (a_tags.insert(crop_spec_tag(s)).second) a_specs.push_back(s);
    }
    if (!a_specs.empty()) {
      const bool primary_mode = shared_by_mode.count(true) ? true : false;
      RunPaths primary{shared_by_mode.at(primary_mode)};
      StagePlan plan;
      plan.stage = Stage::a_pretrain;
      plan.crop_specs = a_specs;
      run_stage(cfg, plan, train, nullptr, primary);
      for (const auto& [mode, dir] : shared_by_mode) {
        if (mode == primary_mode) continue;
        for (const CropSpec& s : a_specs)
          fs::copy_file(primary.branch_ckpt("a", s), RunPaths{dir}.branch_ckpt("a", s),
                        fs::copy_options::overwrite_existing);
      }
    }

    // Stages b and c per cluster mode.
    for (const bool mode : {true, false}) {
      if (!shared_by_mode.count(mode)) continue;
      RunPaths paths{shared_by_mode.at(mode)};
      for (const char stage : {'b', 'c'}) {
        std::set<std::string> tags;
        std::vector<CropSpec> specs;
        for (const auto& c : configs) {
          if (c.cluster != mode || !c.has(stage)) continue;
          for (const CropSpec& s : trained_specs(c))
            if (tags.insert(crop_spec_tag(s)).second) specs.push_back(s);
        }
        if (specs.empty()) continue;
        StagePlan plan;
        plan.stage = stage == 'b' ? Stage::b_window_object : Stage::c_multi_object;
        plan.crop_specs = specs;
        run_stage(cfg, plan, train, &labels_by_mode.at(mode), paths);
      }
    }

    for (size_t ci = 0; ci < configs.size(); ++ci) {
      const AblationConfig& acfg = configs[ci];
      const bool mode = acfg.cluster;
      const Totals t = run_config_for_seed(cfg, acfg, train, test, shared_by_mode.at(mode),
                                           seed_dir + "/" + acfg.name, labels_by_mode.at(mode));
      rows[ci].seed_maps.push_back(t.map);
      rows[ci].seed_median_aps.push_back(t.median_ap);
      std::fprintf(stderr, "[ablate] %s seed %d: mAP %.4f\n", acfg.name.c_str(), k, t.map);
    }
  }

  for (AblationRow& row : rows) {
    double sum = 0.0, sum_med = 0.0;
    for (double v : row.seed_maps) sum += v;
    for (double v : row.seed_median_aps) sum_med += v;
    row.mean_map = sum / double(row.seed_maps.size());
    row.mean_median_ap = sum_med / double(row.seed_median_aps.size());
    std::vector<double> sorted = row.seed_maps;
    std::sort(sorted.begin(), sorted.end());
    const size_t m = sorted.size();
    row.median_map = m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  }

  write_ablate_csv(rows, out_dir + "/ablate.csv");
  return rows;
}

void write_ablate_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_ablate_csv: cannot open " + path);
  const size_t n_seeds = rows.empty() ? 0 : rows[0].seed_maps.size();
  f << "config";
  for (size_t k = 0; k < n_seeds; ++k) f << ",map_seed" << k;
  f << ",mean_map,median_map,mean_median_ap\n";
  char buf[40];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  for (const AblationRow& r : rows) {
    f << r.config;
    for (double v : r.seed_maps) f << "," << fmt(v);
    f << "," << fmt(r.mean_map) << "," << fmt(r.median_map) << "," << fmt(r.mean_median_ap)
      << "\n";
  }
}

}  // namespace reldet
