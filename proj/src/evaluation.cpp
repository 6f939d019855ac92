#include "reldet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace reldet {

namespace fs = std::filesystem;

double average_precision(const std::vector<Detection>& dets, const ClassGts& gts,
                         double iou_thresh, PrCurve* curve) {
  size_t n_gt = 0;
  for (const auto& [scene, boxes] : gts) n_gt += boxes.size();
  if (curve) {
    curve->recall.clear();
    curve->precision.clear();
  }
  if (n_gt == 0 || dets.empty()) return 0.0;

  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].score > dets[b].score; });

  std::map<int, std::vector<bool>> matched;
  for (const auto& [scene, boxes] : gts) matched[scene].assign(boxes.size(), false);

  int tp = 0, fp = 0;
  std::vector<double> recall, precision;
  recall.reserve(dets.size());
  precision.reserve(dets.size());
  for (int idx : order) {
    const Detection& d = dets[idx];
    int best_gt = -1;
    double best_iou = 0.0;
    auto it = gts.find(d.scene_id);
    if (it != gts.end()) {
      const auto& boxes = it->second;
      auto& used = matched[d.scene_id];
      for (size_t g = 0; g < boxes.size(); ++g) {
        if (used[g]) continue;
        const double v = iou(d.box, boxes[g]);
        if (v >= iou_thresh && v > best_iou) {
          best_iou = v;
          best_gt = int(g);
        }
      }
    }
    if (best_gt >= 0) {
      matched[d.scene_id][size_t(best_gt)] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(double(tp) / double(n_gt));
    precision.push_back(double(tp) / double(tp + fp));
  }

  // Monotone precision envelope, then sum rectangles between recall steps.
  std::vector<double> env = precision;
  for (int i = int(env.size()) - 2; i >= 0; --i) env[i] = std::max(env[i], env[i + 1]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * env[i];
    prev_recall = recall[i];
  }
  if (curve) {
    curve->recall = std::move(recall);
    curve->precision = std::move(precision);
  }
  return ap;
}

EvalResult evaluate_detections(const std::vector<Detection>& dets, const Dataset& test_set,
                               double iou_thresh) {
  if (test_set.scenes.empty())
    throw std::runtime_error("evaluate_detections: empty test dataset");
  const int C = test_set.config.n_classes;
  EvalResult res;
  for (int c = 1; c <= C; ++c) {
    ClassGts gts;
    for (const Scene& sc : test_set.scenes)
      for (const SceneObject& o : sc.objects)
        if (o.class_id == c) gts[sc.id].push_back(o.box);
    std::vector<Detection> class_dets;
    for (const Detection& d : dets)
      if (d.class_id == c) class_dets.push_back(d);
    PrCurve curve;
    const double ap = average_precision(class_dets, gts, iou_thresh, &curve);
    res.class_ids.push_back(c);
    res.ap.push_back(ap);
    res.curves.push_back(std::move(curve));
  }
  res.map = std::accumulate(res.ap.begin(), res.ap.end(), 0.0) / double(res.ap.size());
  std::vector<double> sorted = res.ap;
  std::sort(sorted.begin(), sorted.end());
  const size_t m = sorted.size();
  res.median_ap = m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  return res;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

}  // namespace

void write_eval_artifacts(const EvalResult& res, const std::string& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "ap.csv");
    f << "class,ap\n";
    for (size_t i = 0; i < res.class_ids.size(); ++i)
      f << class_name(res.class_ids[i]) << "," << fmt_double(res.ap[i]) << "\n";
    f << "mAP," << fmt_double(res.map) << "\n";
    f << "medianAP," << fmt_double(res.median_ap) << "\n";
  }
  for (size_t i = 0; i < res.class_ids.size(); ++i) {
    const std::string name = class_name(res.class_ids[i]);
    std::ofstream f(fs::path(out_dir) / ("pr_" + name + ".csv"));
    f << "recall,precision\n";
    const PrCurve& c = res.curves[i];
    for (size_t k = 0; k < c.recall.size(); ++k)
      f << fmt_double(c.recall[k]) << "," << fmt_double(c.precision[k]) << "\n";
    write_pr_svg(c, name, (fs::path(out_dir) / ("pr_" + name + ".svg")).string());
  }
}

void write_pr_svg(const PrCurve& curve, const std::string& title, const std::string& path) {
  const int W = 420, H = 420, M = 40;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_pr_svg: cannot open " + path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<rect x=\"" << M << "\" y=\"" << M << "\" width=\"" << W - 2 * M << "\" height=\""
    << H - 2 * M << "\" fill=\"none\" stroke=\"black\"/>\n";
  f << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
    << "precision-recall: " << title << "</text>\n";
  f << "<text x=\"" << W / 2 << "\" y=\"" << H - 8
    << "\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n";
  f << "<text x=\"12\" y=\"" << H / 2
    << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 " << H / 2
    << ")\">precision</text>\n";
  auto px = [&](double r) { return M + r * (W - 2 * M); };
  auto py = [&](double p) { return H - M - p * (H - 2 * M); };
  if (!curve.recall.empty()) {
    f << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    f << px(0.0) << "," << py(curve.precision.front()) << " ";
    for (size_t i = 0; i < curve.recall.size(); ++i)
      f << px(curve.recall[i]) << "," << py(curve.precision[i]) << " ";
    f << "\"/>\n";
  }
  f << "</svg>\n";
}

}  // namespace reldet
