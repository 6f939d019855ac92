#include "reldet/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "reldet/parallel.hpp"

namespace reldet {

using nlohmann::json;
namespace fs = std::filesystem;

const char* kToolVersion = "1.0.0";

DatasetConfig RunConfig::train_data_config() const {
  DatasetConfig d = data;
  d.seed = seed;
  return d;
}

DatasetConfig RunConfig::test_data_config() const {
  DatasetConfig d = data;
  d.n_scenes = n_test_scenes;
  d.seed = seed + 1000003ULL;
  return d;
}

int RunConfig::effective_threads() const {
  return threads > 0 ? threads : default_threads();
}

namespace {

// Pulls known keys out of `j`, erroring on leftovers so typos never pass
// silently.
class Section {
 public:
  Section(const json& j, std::string name) : name_(std::move(name)) {
    if (!j.is_object()) throw UsageError("config section '" + name_ + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) remaining_[it.key()] = it.value();
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = remaining_.find(key);
    if (it == remaining_.end()) return;
    try {
      out = it->second.template get<T>();
    } catch (const json::exception&) {
      throw UsageError("config key '" + name_ + "." + key + "' has the wrong type");
    }
    remaining_.erase(it);
  }

  void get_nan_or(const char* key, double& out) {
    auto it = remaining_.find(key);
    if (it == remaining_.end()) return;
    if (it->second.is_null()) {
      out = std::numeric_limits<double>::quiet_NaN();
    } else {
      out = it->second.get<double>();
    }
    remaining_.erase(it);
  }

  json take(const char* key) {
    auto it = remaining_.find(key);
    if (it == remaining_.end()) return json::object();
    json v = it->second;
    remaining_.erase(it);
    return v;
  }

  bool has(const char* key) const { return remaining_.count(key) > 0; }

  void finish() const {
    if (!remaining_.empty())
      throw UsageError("unknown config key '" + name_ + "." + remaining_.begin()->first + "'");
  }

 private:
  std::string name_;
  std::map<std::string, json> remaining_;
};

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig cfg;
  Section top(j, "<root>");
  if (!top.has("seed")) throw UsageError("config requires a top-level 'seed'");
  top.get("seed", cfg.seed);
  top.get("threads", cfg.threads);

  {
    Section s(top.take("data"), "data");
    s.get("n_scenes", cfg.data.n_scenes);
    s.get("n_test_scenes", cfg.n_test_scenes);
    s.get("scene_size", cfg.data.scene_size);
    s.get("n_classes", cfg.data.n_classes);
    s.get("min_object_size", cfg.data.min_object_size);
    s.get("max_object_size", cfg.data.max_object_size);
    s.get("p_triangle_above_square", cfg.data.p_triangle_above_square);
    s.get("p_cross_right_of_disk", cfg.data.p_cross_right_of_disk);
    s.get("noise_sigma", cfg.data.noise_sigma);
    s.get("n_jitter", cfg.proposals.n_jitter);
    s.get("n_random", cfg.proposals.n_random);
    s.get("center_jitter", cfg.proposals.center_jitter);
    s.get("log_scale_jitter", cfg.proposals.log_scale_jitter);
    s.finish();
  }
  {
    Section s(top.take("cluster"), "cluster");
    s.get("damping", cfg.cluster.damping);
    s.get("max_iter", cfg.cluster.max_iter);
    s.get("stable_iter", cfg.cluster.stable_iter);
    s.get_nan_or("preference", cfg.cluster.preference);
    s.get("max_points_per_fit", cfg.cluster.max_points_per_fit);
    s.get("min_per_class", cfg.cluster.min_per_class);
    s.get("wo_target_lo", cfg.cluster.wo_target_lo);
    s.get("wo_target_hi", cfg.cluster.wo_target_hi);
    s.get("layout_target_lo", cfg.cluster.layout_target_lo);
    s.get("layout_target_hi", cfg.cluster.layout_target_hi);
    s.finish();
  }
  {
    Section s(top.take("stages"), "stages");
    s.get("input_size", cfg.stages.net.input_size);
    s.get("conv1_channels", cfg.stages.net.conv1_channels);
    s.get("conv2_channels", cfg.stages.net.conv2_channels);
    s.get("feature_dim", cfg.stages.net.feature_dim);
    s.get("batch", cfg.stages.batch);
    s.get("lr", cfg.stages.lr);
    s.get("momentum", cfg.stages.momentum);
    s.get("iters_a", cfg.stages.iters_a);
    s.get("iters_b", cfg.stages.iters_b);
    s.get("iters_c", cfg.stages.iters_c);
    s.get("iters_d", cfg.stages.iters_d);
    s.get("min_positive_fraction", cfg.stages.min_positive_fraction);
    s.finish();
  }
  {
    Section s(top.take("svm"), "svm");
    s.get("reg", cfg.svm.reg);
    s.get("epochs", cfg.svm.epochs);
    s.get("lr0", cfg.svm.lr0);
    s.get("lr_decay", cfg.svm.lr_decay);
    s.get("standardize", cfg.svm.standardize);
    s.get("neg_per_scene", cfg.svm_neg_per_scene);
    s.finish();
  }
  {
    Section s(top.take("detect"), "detect");
    s.get("nms_iou", cfg.detect.nms_iou);
    s.get("bbox_ridge", cfg.detect.bbox_ridge);
    s.get("bbox_pos_iou", cfg.detect.bbox_pos_iou);
    s.get("refine", cfg.detect.refine);
    s.finish();
  }
  {
    Section s(top.take("eval"), "eval");
    s.get("iou", cfg.eval_iou);
    s.finish();
  }
  {
    Section s(top.take("ablate"), "ablate");
    s.get("grid", cfg.ablate.grid);
    s.get("seeds", cfg.ablate.seeds);
    s.finish();
  }
  top.finish();

  if (cfg.data.n_scenes < 1 || cfg.n_test_scenes < 1)
    throw UsageError("config: scene counts must be >= 1");
  if (cfg.stages.net.input_size < 8 || cfg.stages.net.input_size % 4 != 0)
    throw UsageError("config: stages.input_size must be >= 8 and divisible by 4");
  if (cfg.ablate.seeds < 1) throw UsageError("config: ablate.seeds must be >= 1");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) {
    json j;
    j["seed"] = 1;
    return parse_run_config(j);
  }
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("config parse error in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["data"] = {{"n_scenes", cfg.data.n_scenes},
               {"n_test_scenes", cfg.n_test_scenes},
               {"scene_size", cfg.data.scene_size},
               {"n_classes", cfg.data.n_classes},
               {"min_object_size", cfg.data.min_object_size},
               {"max_object_size", cfg.data.max_object_size},
               {"p_triangle_above_square", cfg.data.p_triangle_above_square},
               {"p_cross_right_of_disk", cfg.data.p_cross_right_of_disk},
               {"noise_sigma", cfg.data.noise_sigma},
               {"n_jitter", cfg.proposals.n_jitter},
               {"n_random", cfg.proposals.n_random},
               {"center_jitter", cfg.proposals.center_jitter},
               {"log_scale_jitter", cfg.proposals.log_scale_jitter}};
  j["cluster"] = {{"damping", cfg.cluster.damping},
                  {"max_iter", cfg.cluster.max_iter},
                  {"stable_iter", cfg.cluster.stable_iter},
                  {"preference", std::isnan(cfg.cluster.preference)
                                     ? json(nullptr)
                                     : json(cfg.cluster.preference)},
                  {"max_points_per_fit", cfg.cluster.max_points_per_fit},
                  {"min_per_class", cfg.cluster.min_per_class},
                  {"wo_target_lo", cfg.cluster.wo_target_lo},
                  {"wo_target_hi", cfg.cluster.wo_target_hi},
                  {"layout_target_lo", cfg.cluster.layout_target_lo},
                  {"layout_target_hi", cfg.cluster.layout_target_hi}};
  j["stages"] = {{"input_size", cfg.stages.net.input_size},
                 {"conv1_channels", cfg.stages.net.conv1_channels},
                 {"conv2_channels", cfg.stages.net.conv2_channels},
                 {"feature_dim", cfg.stages.net.feature_dim},
                 {"batch", cfg.stages.batch},
                 {"lr", cfg.stages.lr},
                 {"momentum", cfg.stages.momentum},
                 {"iters_a", cfg.stages.iters_a},
                 {"iters_b", cfg.stages.iters_b},
                 {"iters_c", cfg.stages.iters_c},
                 {"iters_d", cfg.stages.iters_d},
                 {"min_positive_fraction", cfg.stages.min_positive_fraction}};
  j["svm"] = {{"reg", cfg.svm.reg},
              {"epochs", cfg.svm.epochs},
              {"lr0", cfg.svm.lr0},
              {"lr_decay", cfg.svm.lr_decay},
              {"standardize", cfg.svm.standardize},
              {"neg_per_scene", cfg.svm_neg_per_scene}};
  j["detect"] = {{"nms_iou", cfg.detect.nms_iou},
                 {"bbox_ridge", cfg.detect.bbox_ridge},
                 {"bbox_pos_iou", cfg.detect.bbox_pos_iou},
                 {"refine", cfg.detect.refine}};
  j["eval"] = {{"iou", cfg.eval_iou}};
  j["ablate"] = {{"grid", cfg.ablate.grid}, {"seeds", cfg.ablate.seeds}};
  return j;
}

std::string fnv1a_hex(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

std::string config_hash(const RunConfig& cfg) { return fnv1a_hex(run_config_to_json(cfg).dump()); }

void write_manifest(const std::string& out_dir, const std::string& subcommand,
                    const RunConfig& cfg, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  fs::create_directories(out_dir);
  json j{{"tool", "reldet"},
         {"tool_version", kToolVersion},
         {"subcommand", subcommand},
         {"seed", cfg.seed},
         {"config_hash", config_hash(cfg)},
         {"config", run_config_to_json(cfg)},
         {"inputs", inputs},
         {"outputs", outputs}};
  std::ofstream f(fs::path(out_dir) / ("manifest_" + subcommand + ".json"));
  f << j.dump(2) << "\n";
}

}  // namespace reldet
