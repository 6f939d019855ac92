#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "reldet/clustering.hpp"
#include "reldet/labeling.hpp"
#include "reldet/net.hpp"
#include "reldet/svm.hpp"
#include "reldet/synthdata.hpp"

namespace reldet {

// CLI exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// CLI exit code 2: an earlier pipeline step has not produced its artifact.
struct PrereqError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ClusterConfig {
  double damping = 0.9;
  int max_iter = 1000;
  int stable_iter = 50;
  double preference = std::numeric_limits<double>::quiet_NaN();  // NaN = AUTO
  int max_points_per_fit = 400;
  int min_per_class = 50;
  int wo_target_lo = 4;   // per-class window-object cluster range
  int wo_target_hi = 10;
  int layout_target_lo = 3;
  int layout_target_hi = 8;
};

struct StageHyper {
  NetConfig net;
  int batch = 64;
  double lr = 0.05;
  double momentum = 0.9;
  int iters_a = 500;
  int iters_b = 500;
  int iters_c = 400;
  int iters_d = 500;
  double min_positive_fraction = 0.25;
};

struct DetectConfig {
  double nms_iou = 0.3;
  double bbox_ridge = 1.0;
  double bbox_pos_iou = 0.6;
  bool refine = true;
};

struct AblateConfig {
  std::string grid = "table1";
  int seeds = 5;
};

struct RunConfig {
  uint64_t seed = 1;
  int threads = 0;  // 0 = hardware concurrency

  DatasetConfig data;      // train split; test derives n_test_scenes + offset seed
  int n_test_scenes = 500;
  ProposalConfig proposals;
  ClusterConfig cluster;
  StageHyper stages;
  SvmTrainConfig svm;
  int svm_neg_per_scene = 8;
  DetectConfig detect;
  double eval_iou = 0.5;
  AblateConfig ablate;

  DatasetConfig train_data_config() const;
  DatasetConfig test_data_config() const;
  int effective_threads() const;
};

// Parse with defaults; unknown keys anywhere are a UsageError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);  // empty path -> defaults
nlohmann::json run_config_to_json(const RunConfig& cfg);

// FNV-1a 64 over the canonical serialization, hex-encoded.
std::string config_hash(const RunConfig& cfg);
std::string fnv1a_hex(const std::string& text);

// Every subcommand records what it ran with; no timestamps, so reruns are
// byte-identical.
void write_manifest(const std::string& out_dir, const std::string& subcommand,
                    const RunConfig& cfg, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs);

extern const char* kToolVersion;

}  // namespace reldet
