#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "reldet/ablation.hpp"
#include "reldet/parallel.hpp"
#include "reldet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace reldet;

namespace {

struct CommonArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = -1;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "RunConfig JSON path");
  cmd->add_option("--seed", args->seed, "master seed (overrides config)")
      ->each([args](const std::string&) { args->seed_set = true; });
  cmd->add_option("--threads", args->threads, "worker thread cap (default: all cores)");
}

RunConfig make_config(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  if (args.threads >= 0) cfg.threads = args.threads;
  return cfg;
}

Dataset load_dataset_checked(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json"))
    throw PrereqError("dataset not found at " + dir + "; run `gen-data` first");
  return load_dataset(dir);
}

std::vector<CropSpec> specs_from_joint_head(const RunPaths& paths) {
  nlohmann::json extra;
  if (!fs::exists(paths.joint_head()))
    throw PrereqError("missing " + paths.joint_head() + "; run `train --stage d` first");
  load_joint_head(paths.joint_head(), &extra);
  std::vector<CropSpec> specs;
  for (const auto& s : extra.at("specs"))
    specs.push_back({s.at("rotation").get<double>(), s.at("scale").get<double>()});
  return specs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reldet: relationship-guided representation learning for shape detection"};
  app.require_subcommand(1);

  CommonArgs common;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  add_common(gen, &common);
  std::string gen_out, gen_role = "train";
  int gen_n = -1;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--role", gen_role, "train or test (seed offset + scene count)")
      ->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--n-scenes", gen_n, "override scene count");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "fit window-object and layout clusters");
  add_common(cluster, &common);
  std::string cl_data, cl_run;
  bool cl_nocluster = false;
  cluster->add_option("--data", cl_data, "training dataset directory")->required();
  cluster->add_option("--run", cl_run, "run directory for artifacts")->required();
  cluster->add_flag("--no-clustering", cl_nocluster,
                    "single regressor per class (ablation variant)");

  // make-labels
  auto* labels_cmd = app.add_subcommand("make-labels", "label candidate windows");
  add_common(labels_cmd, &common);
  std::string ml_data, ml_run;
  bool ml_nocluster = false;
  labels_cmd->add_option("--data", ml_data)->required();
  labels_cmd->add_option("--run", ml_run)->required();
  labels_cmd->add_flag("--no-clustering", ml_nocluster, "use the no-cluster models/labels");

  // train
  auto* train_cmd = app.add_subcommand("train", "train one pipeline stage");
  add_common(train_cmd, &common);
  std::string tr_stage, tr_data, tr_run, tr_branches = "mcrot", tr_init = "auto";
  int tr_iters = -1;
  bool tr_nocluster = false;
  train_cmd->add_option("--stage", tr_stage, "a, b, c or d")
      ->required()
      ->check(CLI::IsMember({"a", "b", "c", "d"}));
  train_cmd->add_option("--data", tr_data)->required();
  train_cmd->add_option("--run", tr_run)->required();
  train_cmd->add_option("--branches", tr_branches, "s12 | mc | mcrot | rot12");
  train_cmd->add_option("--init", tr_init, "auto | a | b | c | random (stage d only)");
  train_cmd->add_option("--iters", tr_iters, "override iteration count");
  train_cmd->add_flag("--no-clustering", tr_nocluster, "use the no-cluster labels");

  // extract-features
  auto* feat = app.add_subcommand("extract-features", "extract concatenated branch features");
  add_common(feat, &common);
  std::string fe_data, fe_run;
  bool fe_nocluster = false;
  feat->add_option("--data", fe_data)->required();
  feat->add_option("--run", fe_run)->required();
  feat->add_flag("--no-clustering", fe_nocluster);

  // train-svm
  auto* svm_cmd = app.add_subcommand("train-svm", "train per-class linear SVMs");
  add_common(svm_cmd, &common);
  std::string sv_run;
  svm_cmd->add_option("--run", sv_run)->required();

  // train-bbox
  auto* bbox_cmd = app.add_subcommand("train-bbox", "train per-class bbox regressors");
  add_common(bbox_cmd, &common);
  std::string bb_run;
  bbox_cmd->add_option("--run", bb_run)->required();

  // detect
  auto* det = app.add_subcommand("detect", "run the detector on a test dataset");
  add_common(det, &common);
  std::string de_data, de_run;
  bool de_norefine = false;
  det->add_option("--data", de_data, "test dataset directory")->required();
  det->add_option("--run", de_run)->required();
  det->add_flag("--no-refine", de_norefine, "skip bbox refinement");

  // eval
  auto* ev = app.add_subcommand("eval", "PASCAL-style AP/mAP evaluation");
  add_common(ev, &common);
  std::string ev_data, ev_run, ev_dets;
  ev->add_option("--data", ev_data, "test dataset directory")->required();
  ev->add_option("--run", ev_run)->required();
  ev->add_option("--detections", ev_dets, "detections JSONL (default: run dir)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run an ablation grid over several seeds");
  add_common(ab, &common);
  std::string ab_out, ab_grid;
  int ab_seeds = -1;
  ab->add_option("--out", ab_out)->required();
  ab->add_option("--grid", ab_grid, "table1|table2|table3|table4|accept6|accept7|accept8|smoke");
  ab->add_option("--seeds", ab_seeds, "number of seeds (default from config)");

  // plot
  auto* plot = app.add_subcommand("plot", "re-render PR SVG plots from eval CSVs");
  add_common(plot, &common);
  std::string pl_run;
  plot->add_option("--run", pl_run)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = make_config(common);

    if (gen->parsed()) {
      DatasetConfig dc = gen_role == "test" ? cfg.test_data_config() : cfg.train_data_config();
      if (gen_n > 0) dc.n_scenes = gen_n;
      save_dataset(generate(dc), gen_out);
      write_manifest(gen_out, "gen-data", cfg, {}, {gen_out + "/scenes.jsonl"});
      std::printf("wrote %d scenes to %s\n", dc.n_scenes, gen_out.c_str());
    } else if (cluster->parsed()) {
      const Dataset train = load_dataset_checked(cl_data);
      RunPaths paths{cl_run};
      run_cluster(cfg, train, paths, !cl_nocluster);
      write_manifest(cl_run, "cluster", cfg, {cl_data}, {paths.clusters()});
      std::printf("wrote %s\n", paths.clusters().c_str());
    } else if (labels_cmd->parsed()) {
      const Dataset train = load_dataset_checked(ml_data);
      RunPaths paths{ml_run};
      const ClusterArtifacts art = load_cluster_artifacts(paths.clusters());
      const LabeledDataset lds = run_make_labels(cfg, train, art, paths, !ml_nocluster);
      write_manifest(ml_run, "make-labels", cfg, {ml_data, paths.clusters()},
                     {paths.labels(!ml_nocluster)});
      std::printf("labeled %zu candidates (N=%d, K=%d)\n", lds.candidates.size(),
                  lds.n_clusters, lds.n_layout);
    } else if (train_cmd->parsed()) {
      const Dataset train = load_dataset_checked(tr_data);
      RunPaths paths{tr_run};
      StagePlan plan;
      plan.stage = tr_stage == "a"   ? Stage::a_pretrain
                   : tr_stage == "b" ? Stage::b_window_object
                   : tr_stage == "c" ? Stage::c_multi_object
                                     : Stage::d_finetune;
      plan.crop_specs = parse_branch_set(tr_branches);
      plan.iterations = tr_iters;
      if (tr_init == "a") plan.init_from = InitFrom::stage_a;
      else if (tr_init == "b") plan.init_from = InitFrom::stage_b;
      else if (tr_init == "c") plan.init_from = InitFrom::stage_c;
      else if (tr_init == "random") plan.init_from = InitFrom::random;
      else if (tr_init != "auto") throw UsageError("bad --init value: " + tr_init);

      LabeledDataset lds;
      const LabeledDataset* lds_ptr = nullptr;
      if (plan.stage != Stage::a_pretrain) {
        const std::string lp = paths.labels(!tr_nocluster);
        if (!fs::exists(lp)) throw PrereqError("missing " + lp + "; run `make-labels` first");
        lds = load_labels_jsonl(lp);
        lds_ptr = &lds;
      }
      const auto outs = run_stage(cfg, plan, train, lds_ptr, paths);
      if (plan.stage == Stage::d_finetune) {
        // Record the branch specs so later subcommands need no flags.
        nlohmann::json extra;
        auto head = load_joint_head(paths.joint_head(), &extra);
        nlohmann::json specs = nlohmann::json::array();
        for (const CropSpec& s : plan.crop_specs)
          specs.push_back({{"rotation", s.rotation_deg}, {"scale", s.scale}});
        extra["specs"] = specs;
        save_joint_head(*head, extra, paths.joint_head());
      }
      write_manifest(tr_run, "train-" + tr_stage, cfg, {tr_data}, outs);
      std::printf("stage %s: wrote %zu artifacts\n", tr_stage.c_str(), outs.size());
    } else if (feat->parsed()) {
      const Dataset train = load_dataset_checked(fe_data);
      RunPaths paths{fe_run};
      const std::string lp = paths.labels(!fe_nocluster);
      if (!fs::exists(lp)) throw PrereqError("missing " + lp + "; run `make-labels` first");
      const LabeledDataset lds = load_labels_jsonl(lp);
      BranchSet branches = load_stage_branches(paths, "d", specs_from_joint_head(paths));
      const FeatureExtraction fx = run_extract_features(cfg, train, lds, branches, paths);
      write_manifest(fe_run, "extract-features", cfg, {fe_data, lp},
                     {paths.features_bin(), paths.features_meta()});
      std::printf("extracted %zu feature rows of dim %d\n", fx.rows.size(), fx.dim);
    } else if (svm_cmd->parsed()) {
      RunPaths paths{sv_run};
      const FeatureExtraction fx = load_feature_extraction(paths);
      run_train_svms(cfg, fx, paths);
      write_manifest(sv_run, "train-svm", cfg, {paths.features_bin()}, {paths.svms()});
      std::printf("wrote %s\n", paths.svms().c_str());
    } else if (bbox_cmd->parsed()) {
      RunPaths paths{bb_run};
      const FeatureExtraction fx = load_feature_extraction(paths);
      run_train_bbox(cfg, fx, paths);
      write_manifest(bb_run, "train-bbox", cfg, {paths.features_bin()}, {paths.bbox()});
      std::printf("wrote %s\n", paths.bbox().c_str());
    } else if (det->parsed()) {
      const Dataset test = load_dataset_checked(de_data);
      RunPaths paths{de_run};
      BranchSet branches = load_stage_branches(paths, "d", specs_from_joint_head(paths));
      const std::vector<LinearSvm> svms = load_svms(paths);
      std::vector<BBoxRegressor> regs;
      const std::vector<BBoxRegressor>* regs_ptr = nullptr;
      if (!de_norefine && fs::exists(paths.bbox())) {
        regs = load_bbox(paths);
        regs_ptr = &regs;
      }
      const auto dets = run_detect(cfg, test, branches, svms, regs_ptr, paths);
      write_manifest(de_run, "detect", cfg, {de_data, paths.svms()}, {paths.detections()});
      std::printf("wrote %zu detections to %s\n", dets.size(), paths.detections().c_str());
    } else if (ev->parsed()) {
      const Dataset test = load_dataset_checked(ev_data);
      RunPaths paths{ev_run};
      const std::string dp = ev_dets.empty() ? paths.detections() : ev_dets;
      if (!fs::exists(dp)) throw PrereqError("missing " + dp + "; run `detect` first");
      const auto dets = load_detections_jsonl(dp);
      const EvalResult res = run_eval(cfg, test, dets, paths);
      write_manifest(ev_run, "eval", cfg, {ev_data, dp}, {paths.eval_dir() + "/ap.csv"});
      for (size_t i = 0; i < res.class_ids.size(); ++i)
        std::printf("AP %-9s %.4f\n", class_name(res.class_ids[i]), res.ap[i]);
      std::printf("mAP %.4f  medianAP %.4f\n", res.map, res.median_ap);
    } else if (ab->parsed()) {
      const std::string grid = ab_grid.empty() ? cfg.ablate.grid : ab_grid;
      const int seeds = ab_seeds > 0 ? ab_seeds : cfg.ablate.seeds;
      const auto rows = run_ablate(cfg, grid, seeds, ab_out);
      write_manifest(ab_out, "ablate", cfg, {}, {ab_out + "/ablate.csv"});
      for (const auto& r : rows)
        std::printf("%-20s mean mAP %.4f  median mAP %.4f\n", r.config.c_str(), r.mean_map,
                    r.median_map);
    } else if (plot->parsed()) {
      RunPaths paths{pl_run};
      const std::string dir = paths.eval_dir();
      if (!fs::exists(dir + "/ap.csv"))
        throw PrereqError("missing " + dir + "/ap.csv; run `eval` first");
      int count = 0;
      for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("pr_", 0) != 0 || entry.path().extension() != ".csv") continue;
        std::ifstream f(entry.path());
        std::string line;
        std::getline(f, line);  // header
        PrCurve curve;
        while (std::getline(f, line)) {
          const size_t comma = line.find(',');
          if (comma == std::string::npos) continue;
          curve.recall.push_back(std::stod(line.substr(0, comma)));
          curve.precision.push_back(std::stod(line.substr(comma + 1)));
        }
        const std::string cls = name.substr(3, name.size() - 7);
        write_pr_svg(curve, cls, (entry.path().parent_path() / ("pr_" + cls + ".svg")).string());
        ++count;
      }
      std::printf("re-rendered %d PR plots in %s\n", count, dir.c_str());
    }
    return 0;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const PrereqError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
