#include "reldet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace reldet {

using nlohmann::json;

namespace {
constexpr char kMagic[4] = {'R', 'D', 'B', 'F'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_blob_file(const BlobFile& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_blob_file: cannot open " + path);
  json header = f.header;
  json sizes = json::array();
  for (const auto& b : f.blobs) sizes.push_back(b.size());
  header["blob_sizes"] = sizes;
  const std::string htext = header.dump();
  out.write(kMagic, 4);
  const uint32_t ver = kVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), htext.size());
  for (const auto& b : f.blobs)
    out.write(reinterpret_cast<const char*>(b.data()), b.size() * sizeof(double));
  if (!out) throw std::runtime_error("save_blob_file: write failed for " + path);
}

BlobFile load_blob_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_blob_file: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_blob_file: bad magic in " + path);
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kVersion)
    throw std::runtime_error("load_blob_file: unsupported version in " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  BlobFile f;
  f.header = json::parse(htext);
  for (const auto& s : f.header.at("blob_sizes")) {
    std::vector<double> blob(s.get<size_t>());
    in.read(reinterpret_cast<char*>(blob.data()), std::streamsize(blob.size() * sizeof(double)));
    f.blobs.push_back(std::move(blob));
  }
  if (!in) throw std::runtime_error("load_blob_file: truncated " + path);
  return f;
}

void save_branch_checkpoint(BranchNet& net, const CheckpointMeta& meta, const std::string& path) {
  BlobFile f;
  const NetConfig& cfg = net.config();
  const HeadConfig& heads = net.head_config();
  f.header = json{{"kind", "branch_checkpoint"},
                  {"stage", meta.stage},
                  {"seed", meta.seed},
                  {"crop", {{"rotation", meta.crop.rotation_deg}, {"scale", meta.crop.scale}}},
                  {"net",
                   {{"input_size", cfg.input_size},
                    {"conv1_channels", cfg.conv1_channels},
                    {"conv2_channels", cfg.conv2_channels},
                    {"feature_dim", cfg.feature_dim}}},
                  {"heads",
                   {{"n_clusters", heads.n_clusters},
                    {"n_layout", heads.n_layout},
                    {"n_layout_classes", heads.n_layout_classes},
                    {"n_classify", heads.n_classify}}}};
  json names = json::array();
  for (Param* p : net.params()) {
    names.push_back(p->name);
    f.blobs.emplace_back(p->value.begin(), p->value.end());
  }
  f.header["param_names"] = names;
  save_blob_file(f, path);
}

std::unique_ptr<BranchNet> load_branch_checkpoint(const std::string& path, CheckpointMeta* meta) {
  BlobFile f = load_blob_file(path);
  if (f.header.value("kind", "") != "branch_checkpoint")
    throw std::runtime_error("load_branch_checkpoint: not a branch checkpoint: " + path);
  NetConfig cfg;
  const auto& jn = f.header.at("net");
  cfg.input_size = jn.at("input_size").get<int>();
  cfg.conv1_channels = jn.at("conv1_channels").get<int>();
  cfg.conv2_channels = jn.at("conv2_channels").get<int>();
  cfg.feature_dim = jn.at("feature_dim").get<int>();
  HeadConfig heads;
  const auto& jh = f.header.at("heads");
  heads.n_clusters = jh.at("n_clusters").get<int>();
  heads.n_layout = jh.at("n_layout").get<int>();
  heads.n_layout_classes = jh.at("n_layout_classes").get<int>();
  heads.n_classify = jh.at("n_classify").get<int>();

  auto net = std::make_unique<BranchNet>(cfg, heads, /*seed=*/0);
  auto params = net->params();
  if (params.size() != f.blobs.size())
    throw std::runtime_error("load_branch_checkpoint: parameter count mismatch in " + path);
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.size() != f.blobs[i].size())
      throw std::runtime_error("load_branch_checkpoint: size mismatch for " + params[i]->name);
    params[i]->value.assign(f.blobs[i].begin(), f.blobs[i].end());
  }
  if (meta) {
    meta->stage = f.header.at("stage").get<std::string>();
    meta->seed = f.header.at("seed").get<uint64_t>();
    meta->crop.rotation_deg = f.header.at("crop").at("rotation").get<double>();
    meta->crop.scale = f.header.at("crop").at("scale").get<double>();
  }
  return net;
}

void save_joint_head(Dense& head, const json& extra, const std::string& path) {
  BlobFile f;
  f.header = json{{"kind", "joint_head"},
                  {"in_dim", head.in_dim()},
                  {"out_dim", head.out_dim()},
                  {"extra", extra}};
  f.blobs.emplace_back(head.weight.value.begin(), head.weight.value.end());
  f.blobs.emplace_back(head.bias.value.begin(), head.bias.value.end());
  save_blob_file(f, path);
}

std::unique_ptr<Dense> load_joint_head(const std::string& path, json* extra) {
  BlobFile f = load_blob_file(path);
  if (f.header.value("kind", "") != "joint_head")
    throw std::runtime_error("load_joint_head: not a joint head file: " + path);
  auto head = std::make_unique<Dense>("joint_head", f.header.at("in_dim").get<int>(),
                                      f.header.at("out_dim").get<int>());
  if (f.blobs.size() != 2 || f.blobs[0].size() != head->weight.value.size() ||
      f.blobs[1].size() != head->bias.value.size())
    throw std::runtime_error("load_joint_head: blob size mismatch in " + path);
  head->weight.value.assign(f.blobs[0].begin(), f.blobs[0].end());
  head->bias.value.assign(f.blobs[1].begin(), f.blobs[1].end());
  if (extra) *extra = f.header.at("extra");
  return head;
}

}  // namespace reldet
