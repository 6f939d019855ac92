#include "reldet/features.hpp"

#include <algorithm>
#include <cstdio>

namespace reldet {

int BranchSet::feature_dim() const {
  int d = 0;
  for (const auto& n : nets) d += n->config().feature_dim;
  return d;
}

std::vector<int> BranchSet::branch_dims() const {
  std::vector<int> dims;
  for (const auto& n : nets) dims.push_back(n->config().feature_dim);
  return dims;
}

std::unique_ptr<BranchNet> clone_net(BranchNet& net) {
  auto copy = std::make_unique<BranchNet>(net.config(), net.head_config(), /*seed=*/0);
  auto src = net.params();
  auto dst = copy->params();
  for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  return copy;
}

BranchSet clone_branch_set(BranchSet& bs) {
  BranchSet out;
  out.specs = bs.specs;
  for (auto& n : bs.nets) out.nets.push_back(clone_net(*n));
  return out;
}

Tensor make_crop_batch(const Image& scene, const std::vector<Box>& windows, const CropSpec& spec,
                       int input_size) {
  Tensor batch({int(windows.size()), input_size, input_size, 1});
  const size_t per = size_t(input_size) * input_size;
  for (size_t i = 0; i < windows.size(); ++i) {
    const Image crop = sample_crop(scene, windows[i], spec, input_size);
    std::copy(crop.data.begin(), crop.data.end(), batch.data.begin() + i * per);
  }
  return batch;
}

std::vector<double> extract_scene_features(const Image& scene, const std::vector<Box>& windows,
                                           BranchSet& branches, int batch_size) {
  const int n = int(windows.size());
  const int dim = branches.feature_dim();
  std::vector<double> out(size_t(n) * dim, 0.0);
  if (n == 0) return out;

  for (int start = 0; start < n; start += batch_size) {
    const int count = std::min(batch_size, n - start);
    const std::vector<Box> chunk(windows.begin() + start, windows.begin() + start + count);
    int offset = 0;
    for (size_t bidx = 0; bidx < branches.nets.size(); ++bidx) {
      BranchNet& net = *branches.nets[bidx];
      const int d = net.config().feature_dim;
      const Tensor crops =
          make_crop_batch(scene, chunk, branches.specs[bidx], net.config().input_size);
      const Tensor feats = net.features(crops);
      for (int i = 0; i < count; ++i)
        std::copy(feats.data.begin() + size_t(i) * d, feats.data.begin() + size_t(i + 1) * d,
                  out.begin() + size_t(start + i) * dim + offset);
      offset += d;
    }
  }
  return out;
}

std::vector<CropSpec> crop_specs_for_scales(const std::vector<double>& scales) {
  std::vector<CropSpec> specs;
  for (double s : scales) specs.push_back({0.0, s});
  return specs;
}

std::string crop_spec_tag(const CropSpec& spec) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "r%03d_s%03d", int(spec.rotation_deg),
                int(spec.scale * 100 + 0.5));
  return buf;
}

}  // namespace reldet
