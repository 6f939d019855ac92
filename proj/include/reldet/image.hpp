#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reldet/box.hpp"

namespace reldet {

// Grayscale image, row-major, intensities in [0, 1].
// Pixel (row r, col c) covers the unit square [c, c+1) x [r, r+1); its
// center is at continuous coordinates (c + 0.5, r + 0.5).
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), data(size_t(w) * h, fill) {}

  double& at(int row, int col) { return data[size_t(row) * width + col]; }
  double at(int row, int col) const { return data[size_t(row) * width + col]; }

  bool empty() const { return width <= 0 || height <= 0; }
  double mean() const;

  // Bilinear sample at continuous scene coordinates (px, py); out-of-scene
  // support pixels contribute `fill`.
  double bilinear(double px, double py, double fill) const;
};

// Cut an out_size x out_size patch for the given window and crop spec.
// The sampling grid has extent (scale*W, scale*H), is centered on the window
// center and rotated so the content appears rotated anti-clockwise by the
// spec's angle. Samples beyond the scene border take the scene mean.
// Throws std::invalid_argument for out_size < 8 or an empty scene.
Image sample_crop(const Image& scene, const Box& window, const CropSpec& spec, int out_size);

// 8-bit binary PGM (P5). Intensities clamp to [0,1] and round to 0..255.
void save_pgm(const Image& img, const std::string& path);
Image load_pgm(const std::string& path);

}  // namespace reldet
