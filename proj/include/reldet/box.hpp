#pragma once

#include <array>
#include <vector>

namespace reldet {

// Axis-aligned rectangle in center-size form: center (x, y), size (w, h).
// Image coordinates: x grows right, y grows down. w, h must be > 0.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  Box() = default;
  Box(double cx, double cy, double bw, double bh) : x(cx), y(cy), w(bw), h(bh) {}

  bool valid() const { return w > 0.0 && h > 0.0; }
  double area() const { return w * h; }

  double left() const { return x - w / 2.0; }
  double top() const { return y - h / 2.0; }
  double right() const { return x + w / 2.0; }
  double bottom() const { return y + h / 2.0; }

  // Corner form (x1, y1, x2, y2).
  std::array<double, 4> corners() const { return {left(), top(), right(), bottom()}; }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1);
  }
};

// Window-object relationship descriptor: the relative location and size of a
// ground-truth box against a candidate window, normalized by the window size.
struct RelLoc {
  double dx = 0.0;  // (x_s - x_g) / W_s
  double dy = 0.0;  // (y_s - y_g) / H_s
  double dw = 0.0;  // log(W_s / W_g)
  double dh = 0.0;  // log(H_s / H_g)

  RelLoc() = default;
  RelLoc(double a, double b, double c, double d) : dx(a), dy(b), dw(c), dh(d) {}

  double& operator[](int i) { return (&dx)[i]; }
  double operator[](int i) const { return (&dx)[i]; }

  double squared_distance(const RelLoc& o) const {
    const double a = dx - o.dx, b = dy - o.dy, c = dw - o.dw, d = dh - o.dh;
    return a * a + b * b + c * c + d * d;
  }
};

// One crop configuration: rotation in degrees and context scale multiplier.
struct CropSpec {
  double rotation_deg = 0.0;  // one of {0, 45, 90}
  double scale = 1.2;         // one of {0.8, 1.2, 1.8, 2.7}

  bool operator==(const CropSpec& o) const {
    return rotation_deg == o.rotation_deg && scale == o.scale;
  }
};

// The six crop configurations used by the detection pipeline, in the fixed
// concatenation order: (0,0.8) (0,1.2) (45,1.2) (90,1.2) (0,1.8) (0,2.7).
const std::vector<CropSpec>& detection_crop_specs();

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

RelLoc rel_loc(const Box& candidate, const Box& gt);
Box apply_rel_loc(const Box& candidate, const RelLoc& r);

// Axis-aligned sampling region for a crop: same center, size scaled by spec.
Box crop_region(const Box& window, const CropSpec& spec);

// Fraction of the ground-truth area covered by crop_region(window, scale).
double coverage_fraction(const Box& window, const Box& gt, double scale);

}  // namespace reldet
