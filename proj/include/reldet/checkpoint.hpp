#pragma once

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "reldet/box.hpp"
#include "reldet/net.hpp"

namespace reldet {

// Versioned binary container: magic, version, JSON header, then raw
// little-endian f64 blobs in header-declared order.
struct BlobFile {
  nlohmann::json header;
  std::vector<std::vector<double>> blobs;
};

void save_blob_file(const BlobFile& f, const std::string& path);
BlobFile load_blob_file(const std::string& path);

struct CheckpointMeta {
  std::string stage;  // "init", "a", "b", "c", "d"
  uint64_t seed = 0;
  CropSpec crop;
};

void save_branch_checkpoint(BranchNet& net, const CheckpointMeta& meta, const std::string& path);
std::unique_ptr<BranchNet> load_branch_checkpoint(const std::string& path, CheckpointMeta* meta);

// Stage-d joint classification head over concatenated branch features.
void save_joint_head(Dense& head, const nlohmann::json& extra, const std::string& path);
std::unique_ptr<Dense> load_joint_head(const std::string& path, nlohmann::json* extra);

}  // namespace reldet
