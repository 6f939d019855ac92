#pragma once

#include <string>
#include <vector>

#include "reldet/pipeline.hpp"

namespace reldet {

// One column of an ablation table: which training stages run, which crop
// branches feed the detector, and whether window-object clustering is used.
struct AblationConfig {
  std::string name;
  std::string stages;  // "ad", "abd", "abcd", or "rd" (random init + finetune)
  std::vector<CropSpec> specs;
  bool cluster = true;
  bool shared_params = false;  // one net trained at 1.2 reused for every scale

  bool has(char stage) const { return stages.find(stage) != std::string::npos; }
};

// Named branch sets: "s12", "mc" (4 scales), "mcrot" (6 specs), "rot12".
std::vector<CropSpec> parse_branch_set(const std::string& name);

// Grids: table1, table2, table3, table4, accept6, accept7, accept8, smoke.
std::vector<AblationConfig> grid_configs(const std::string& grid);

struct AblationRow {
  std::string config;
  std::vector<double> seed_maps;        // mAP per seed
  std::vector<double> seed_median_aps;  // per-class median AP per seed
  double mean_map = 0.0;
  double median_map = 0.0;     // median over seeds of mAP
  double mean_median_ap = 0.0;
};

// Run every configuration of the grid over `n_seeds` seeds (master seeds
// cfg.seed, cfg.seed+1, ...), sharing stage checkpoints between configs of
// the same seed, and write <out_dir>/ablate.csv.
std::vector<AblationRow> run_ablate(const RunConfig& cfg, const std::string& grid, int n_seeds,
                                    const std::string& out_dir);

void write_ablate_csv(const std::vector<AblationRow>& rows, const std::string& path);

}  // namespace reldet
