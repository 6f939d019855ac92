#include "reldet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "reldet/rng.hpp"

namespace reldet {

namespace fs = std::filesystem;
using nlohmann::json;

const char* class_name(int class_id) {
  switch (class_id) {
    case kDisk: return "disk";
    case kSquare: return "square";
    case kTriangle: return "triangle";
    case kCross: return "cross";
    default: return "background";
  }
}

double covered_area(const Box& target, const std::vector<Box>& covers) {
  // Coordinate compression over covers clipped to the target.
  std::vector<double> xs = {target.left(), target.right()};
  std::vector<double> ys = {target.top(), target.bottom()};
  for (const Box& b : covers) {
    xs.push_back(std::clamp(b.left(), target.left(), target.right()));
    xs.push_back(std::clamp(b.right(), target.left(), target.right()));
    ys.push_back(std::clamp(b.top(), target.top(), target.bottom()));
    ys.push_back(std::clamp(b.bottom(), target.top(), target.bottom()));
  }
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  double area = 0.0;
  for (size_t i = 0; i + 1 < xs.size(); ++i) {
    const double w = xs[i + 1] - xs[i];
    if (w <= 0.0) continue;
    const double cx = 0.5 * (xs[i] + xs[i + 1]);
    for (size_t j = 0; j + 1 < ys.size(); ++j) {
      const double h = ys[j + 1] - ys[j];
      if (h <= 0.0) continue;
      const double cy = 0.5 * (ys[j] + ys[j + 1]);
      for (const Box& b : covers) {
        if (cx > b.left() && cx < b.right() && cy > b.top() && cy < b.bottom()) {
          area += w * h;
          break;
        }
      }
    }
  }
  return area;
}

namespace {

bool point_in_shape(int class_id, const Box& b, double px, double py) {
  const double dx = px - b.x, dy = py - b.y;
  const double hw = b.w / 2.0, hh = b.h / 2.0;
  switch (class_id) {
    case kDisk:
      return dx * dx + dy * dy <= hw * hw;
    case kSquare:
      return std::abs(dx) <= hw && std::abs(dy) <= hh;
    case kTriangle: {
      // Upward-pointing isoceles triangle filling the box.
      if (dy < -hh || dy > hh) return false;
      const double half_width_here = (dy + hh) / b.h * hw;
      return std::abs(dx) <= half_width_here;
    }
    case kCross: {
      const double arm = b.w / 6.0;
      return (std::abs(dx) <= arm && std::abs(dy) <= hh) ||
             (std::abs(dy) <= arm && std::abs(dx) <= hw);
    }
    default:
      return false;
  }
}

void draw_object(Image& img, const SceneObject& obj, double intensity) {
  const int r0 = std::max(0, int(std::floor(obj.box.top())));
  const int r1 = std::min(img.height - 1, int(std::ceil(obj.box.bottom())));
  const int c0 = std::max(0, int(std::floor(obj.box.left())));
  const int c1 = std::min(img.width - 1, int(std::ceil(obj.box.right())));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      if (point_in_shape(obj.class_id, obj.box, c + 0.5, r + 0.5)) img.at(r, c) = intensity;
}

double contrasting_intensity(Rng& rng, double bg) {
  for (int t = 0; t < 50; ++t) {
    const double v = rng.uniform(0.0, 1.0);
    if (std::abs(v - bg) >= 0.2) return v;
  }
  return std::min(1.0, bg + 0.3);
}

Scene make_scene(int id, const DatasetConfig& cfg, Rng rng, int* skipped) {
  Scene sc;
  sc.id = id;
  sc.size = cfg.scene_size;
  const double S = cfg.scene_size;

  const double bg = rng.uniform(0.15, 0.45);
  sc.image = Image(cfg.scene_size, cfg.scene_size, bg);

  auto place_free = [&](int class_id) -> SceneObject {
    SceneObject o;
    o.class_id = class_id;
    const double s = rng.uniform(cfg.min_object_size, cfg.max_object_size);
    o.box = Box(rng.uniform(s / 2, S - s / 2), rng.uniform(s / 2, S - s / 2), s, s);
    return o;
  };

  const double u = rng.uniform();
  const int n_base = u < 0.35 ? 1 : (u < 0.80 ? 2 : 3);
  for (int i = 0; i < n_base; ++i) {
    const int cls = 1 + int(rng.uniform_index(uint64_t(cfg.n_classes)));
    sc.objects.push_back(place_free(cls));
  }

  const double min_s = cfg.min_object_size;

  // Rule 1: triangle directly above the first square.
  for (size_t i = 0; i < sc.objects.size(); ++i) {
    if (sc.objects[i].class_id != kSquare) continue;
    const Box& sq = sc.objects[i].box;
    if (sc.objects.size() < 4 && sq.top() >= min_s + 1.0) {
      sc.rules.square_eligible = true;
      if (rng.bernoulli(cfg.p_triangle_above_square)) {
        sc.rules.square_fired = true;
        bool placed = false;
        for (int t = 0; t < 50 && !placed; ++t) {
          const double ts = rng.uniform(min_s, std::min(cfg.max_object_size, sq.top()));
          const double gap = rng.uniform(0.0, std::min(3.0, sq.top() - ts));
          const double cx = std::clamp(sq.x + rng.uniform(-3.0, 3.0), ts / 2, S - ts / 2);
          const double cy = sq.top() - gap - ts / 2;
          if (cy - ts / 2 >= 0.0) {
            SceneObject tri;
            tri.class_id = kTriangle;
            tri.box = Box(cx, cy, ts, ts);
            sc.objects.push_back(tri);
            placed = true;
          }
        }
        if (!placed) ++*skipped;
      }
    }
    break;
  }

  // Rule 2: cross directly right of the first disk.
  for (size_t i = 0; i < sc.objects.size(); ++i) {
    if (sc.objects[i].class_id != kDisk) continue;
    const Box& dk = sc.objects[i].box;
    if (sc.objects.size() < 4 && S - dk.right() >= min_s + 1.0) {
      sc.rules.disk_eligible = true;
      if (rng.bernoulli(cfg.p_cross_right_of_disk)) {
        sc.rules.disk_fired = true;
        bool placed = false;
        for (int t = 0; t < 50 && !placed; ++t) {
          const double cs = rng.uniform(min_s, std::min(cfg.max_object_size, S - dk.right()));
          const double gap = rng.uniform(0.0, std::min(3.0, S - dk.right() - cs));
          const double cy = std::clamp(dk.y + rng.uniform(-3.0, 3.0), cs / 2, S - cs / 2);
          const double cx = dk.right() + gap + cs / 2;
          if (cx + cs / 2 <= S) {
            SceneObject cr;
            cr.class_id = kCross;
            cr.box = Box(cx, cy, cs, cs);
            sc.objects.push_back(cr);
            placed = true;
          }
        }
        if (!placed) ++*skipped;
      }
    }
    break;
  }

  for (const SceneObject& o : sc.objects)
    draw_object(sc.image, o, contrasting_intensity(rng, bg));

  // Later-drawn objects occlude earlier ones; record exact bbox overlap.
  for (size_t i = 0; i < sc.objects.size(); ++i) {
    std::vector<Box> later;
    for (size_t j = i + 1; j < sc.objects.size(); ++j) later.push_back(sc.objects[j].box);
    sc.objects[i].occluded_fraction =
        later.empty() ? 0.0 : covered_area(sc.objects[i].box, later) / sc.objects[i].box.area();
  }

  for (double& v : sc.image.data) {
    v += cfg.noise_sigma * rng.normal();
    v = std::clamp(v, 0.0, 1.0);
  }
  return sc;
}

}  // namespace

Dataset generate(const DatasetConfig& config) {
  if (config.n_scenes < 1) throw std::invalid_argument("generate: n_scenes must be >= 1");
  Dataset ds;
  ds.config = config;
  ds.scenes.reserve(config.n_scenes);
  Rng base(config.seed);
  for (int i = 0; i < config.n_scenes; ++i)
    ds.scenes.push_back(make_scene(i, config, base.fork(uint64_t(i) + 1), &ds.skipped_objects));
  return ds;
}

RenderStats render_stats(const Dataset& ds) {
  const int C = ds.config.n_classes;
  RenderStats st;
  st.n_scenes = int(ds.scenes.size());
  st.skipped_objects = ds.skipped_objects;
  st.class_counts.assign(C + 1, 0);
  st.size_hist.assign(C + 1, std::vector<int>(7, 0));
  st.co_occurrence.assign(C + 1, std::vector<int>(C + 1, 0));
  for (const Scene& sc : ds.scenes) {
    std::vector<bool> present(C + 1, false);
    for (const SceneObject& o : sc.objects) {
      st.class_counts[o.class_id] += 1;
      const int bin = std::clamp(int((o.box.w - 12.0) / 4.0), 0, 6);
      st.size_hist[o.class_id][bin] += 1;
      present[o.class_id] = true;
    }
    for (int i = 1; i <= C; ++i)
      for (int j = 1; j <= C; ++j)
        if (present[i] && present[j]) st.co_occurrence[i][j] += 1;
  }
  return st;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");

  json manifest{{"format", "reldet-dataset"},
                {"version", 1},
                {"n_scenes", ds.config.n_scenes},
                {"scene_size", ds.config.scene_size},
                {"n_classes", ds.config.n_classes},
                {"min_object_size", ds.config.min_object_size},
                {"max_object_size", ds.config.max_object_size},
                {"p_triangle_above_square", ds.config.p_triangle_above_square},
                {"p_cross_right_of_disk", ds.config.p_cross_right_of_disk},
                {"noise_sigma", ds.config.noise_sigma},
                {"seed", ds.config.seed},
                {"skipped_objects", ds.skipped_objects}};
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";

  std::ofstream sf(fs::path(dir) / "scenes.jsonl");
  for (const Scene& sc : ds.scenes) {
    char img_name[64];
    std::snprintf(img_name, sizeof(img_name), "images/scene_%06d.pgm", sc.id);
    save_pgm(sc.image, (fs::path(dir) / img_name).string());

    json objs = json::array();
    for (const SceneObject& o : sc.objects)
      objs.push_back({{"box", {o.box.x, o.box.y, o.box.w, o.box.h}},
                      {"class_id", o.class_id},
                      {"occluded_fraction", o.occluded_fraction}});
    json line{{"id", sc.id},
              {"size", sc.size},
              {"image", img_name},
              {"objects", objs},
              {"rules",
               {{"square_eligible", sc.rules.square_eligible},
                {"square_fired", sc.rules.square_fired},
                {"disk_eligible", sc.rules.disk_eligible},
                {"disk_fired", sc.rules.disk_fired}}}};
    sf << line.dump() << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("load_dataset: missing manifest.json in " + dir);
  json manifest = json::parse(mf);
  Dataset ds;
  ds.config.n_scenes = manifest.at("n_scenes").get<int>();
  ds.config.scene_size = manifest.at("scene_size").get<int>();
  ds.config.n_classes = manifest.at("n_classes").get<int>();
  ds.config.min_object_size = manifest.at("min_object_size").get<double>();
  ds.config.max_object_size = manifest.at("max_object_size").get<double>();
  ds.config.p_triangle_above_square = manifest.at("p_triangle_above_square").get<double>();
  ds.config.p_cross_right_of_disk = manifest.at("p_cross_right_of_disk").get<double>();
  ds.config.noise_sigma = manifest.at("noise_sigma").get<double>();
  ds.config.seed = manifest.at("seed").get<uint64_t>();
  ds.skipped_objects = manifest.at("skipped_objects").get<int>();

  std::ifstream sf(fs::path(dir) / "scenes.jsonl");
  if (!sf) throw std::runtime_error("load_dataset: missing scenes.jsonl in " + dir);
  std::string line;
  while (std::getline(sf, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Scene sc;
    sc.id = j.at("id").get<int>();
    sc.size = j.at("size").get<int>();
    sc.image = load_pgm((fs::path(dir) / j.at("image").get<std::string>()).string());
    for (const auto& o : j.at("objects")) {
      SceneObject obj;
      const auto& b = o.at("box");
      obj.box = Box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>());
      obj.class_id = o.at("class_id").get<int>();
      obj.occluded_fraction = o.at("occluded_fraction").get<double>();
      sc.objects.push_back(obj);
    }
    const auto& r = j.at("rules");
    sc.rules.square_eligible = r.at("square_eligible").get<bool>();
    sc.rules.square_fired = r.at("square_fired").get<bool>();
    sc.rules.disk_eligible = r.at("disk_eligible").get<bool>();
    sc.rules.disk_fired = r.at("disk_fired").get<bool>();
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

}  // namespace reldet
