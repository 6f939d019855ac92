#include "reldet/box.hpp"

#include <algorithm>
#include <cmath>

namespace reldet {

const std::vector<CropSpec>& detection_crop_specs() {
  static const std::vector<CropSpec> specs = {
      {0.0, 0.8}, {0.0, 1.2}, {45.0, 1.2}, {90.0, 1.2}, {0.0, 1.8}, {0.0, 2.7}};
  return specs;
}

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

RelLoc rel_loc(const Box& candidate, const Box& gt) {
  return RelLoc((candidate.x - gt.x) / candidate.w, (candidate.y - gt.y) / candidate.h,
                std::log(candidate.w / gt.w), std::log(candidate.h / gt.h));
}

Box apply_rel_loc(const Box& candidate, const RelLoc& r) {
  return Box(candidate.x - r.dx * candidate.w, candidate.y - r.dy * candidate.h,
             candidate.w * std::exp(-r.dw), candidate.h * std::exp(-r.dh));
}

Box crop_region(const Box& window, const CropSpec& spec) {
  return Box(window.x, window.y, spec.scale * window.w, spec.scale * window.h);
}

double coverage_fraction(const Box& window, const Box& gt, double scale) {
  const Box region = crop_region(window, CropSpec{0.0, scale});
  return intersection_area(region, gt) / gt.area();
}

}  // namespace reldet
