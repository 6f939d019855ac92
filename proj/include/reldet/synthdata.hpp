#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reldet/box.hpp"
#include "reldet/image.hpp"

namespace reldet {

// Shape classes. 0 is reserved for background everywhere.
enum ShapeClass : int { kDisk = 1, kSquare = 2, kTriangle = 3, kCross = 4 };
const char* class_name(int class_id);

struct SceneObject {
  Box box;
  int class_id = 0;
  double occluded_fraction = 0.0;  // bbox area covered by later-drawn objects
};

// Co-occurrence rule bookkeeping, recorded so frequency checks need no
// geometric re-detection.
struct RuleFlags {
  bool square_eligible = false;
  bool square_fired = false;
  bool disk_eligible = false;
  bool disk_fired = false;
};

struct Scene {
  int id = 0;
  int size = 96;
  Image image;
  std::vector<SceneObject> objects;
  RuleFlags rules;
};

struct DatasetConfig {
  int n_scenes = 100;
  int scene_size = 96;
  int n_classes = 4;
  double min_object_size = 12.0;
  double max_object_size = 40.0;
  double p_triangle_above_square = 0.6;
  double p_cross_right_of_disk = 0.5;
  double noise_sigma = 0.05;
  uint64_t seed = 1;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Scene> scenes;
  int skipped_objects = 0;  // placements abandoned after 50 rejection samples
};

Dataset generate(const DatasetConfig& config);

struct RenderStats {
  std::vector<int> class_counts;              // index 1..C
  std::vector<std::vector<int>> size_hist;    // per class, 7 bins of 4px from 12
  std::vector<std::vector<int>> co_occurrence;  // scenes containing both i and j
  int n_scenes = 0;
  int skipped_objects = 0;
};

RenderStats render_stats(const Dataset& ds);

// Dataset directory layout: manifest.json, scenes.jsonl, images/*.pgm.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Exact area of bbox `target` covered by the union of `covers`.
double covered_area(const Box& target, const std::vector<Box>& covers);

}  // namespace reldet
