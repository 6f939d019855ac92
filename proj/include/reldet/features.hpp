#pragma once

#include <memory>
#include <string>
#include <vector>

#include "reldet/box.hpp"
#include "reldet/checkpoint.hpp"
#include "reldet/image.hpp"
#include "reldet/net.hpp"

namespace reldet {

// Ordered set of per-(rotation, scale) feature extractors. The order fixes
// the concatenation layout of the combined feature vector.
struct BranchSet {
  std::vector<CropSpec> specs;
  std::vector<std::unique_ptr<BranchNet>> nets;

  int feature_dim() const;
  std::vector<int> branch_dims() const;
};

// Deep copy (fresh forward caches); needed because forward passes cache
// state, so concurrent scenes must not share one net.
std::unique_ptr<BranchNet> clone_net(BranchNet& net);
BranchSet clone_branch_set(BranchSet& bs);

// Crop a batch of windows from one scene for a single spec: (B, S, S, 1).
Tensor make_crop_batch(const Image& scene, const std::vector<Box>& windows, const CropSpec& spec,
                       int input_size);

// Concatenated features for all windows of one scene, row-major (n, dim).
std::vector<double> extract_scene_features(const Image& scene, const std::vector<Box>& windows,
                                           BranchSet& branches, int batch_size = 64);

// Crop spec helpers for ablation configurations.
std::vector<CropSpec> crop_specs_for_scales(const std::vector<double>& scales);
std::string crop_spec_tag(const CropSpec& spec);

}  // namespace reldet
