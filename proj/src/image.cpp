#include "reldet/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace reldet {

double Image::mean() const {
  if (data.empty()) return 0.0;
  return std::accumulate(data.begin(), data.end(), 0.0) / double(data.size());
}

double Image::bilinear(double px, double py, double fill) const {
  // Sample the field defined by pixel centers at (c+0.5, r+0.5).
  const double gx = px - 0.5;
  const double gy = py - 0.5;
  const int c0 = int(std::floor(gx));
  const int r0 = int(std::floor(gy));
  const double fx = gx - c0;
  const double fy = gy - r0;

  auto value = [&](int r, int c) -> double {
    if (r < 0 || r >= height || c < 0 || c >= width) return fill;
    return at(r, c);
  };

  const double v00 = value(r0, c0);
  const double v01 = value(r0, c0 + 1);
  const double v10 = value(r0 + 1, c0);
  const double v11 = value(r0 + 1, c0 + 1);
  return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
}

Image sample_crop(const Image& scene, const Box& window, const CropSpec& spec, int out_size) {
  if (out_size < 8) throw std::invalid_argument("sample_crop: out_size must be >= 8");
  if (scene.empty()) throw std::invalid_argument("sample_crop: empty scene");

  const double fill = scene.mean();
  const double rad = spec.rotation_deg * (3.14159265358979323846 / 180.0);
  const double ca = std::cos(rad);
  const double sa = std::sin(rad);
  const double ew = spec.scale * window.w;
  const double eh = spec.scale * window.h;

  Image out(out_size, out_size);
  for (int r = 0; r < out_size; ++r) {
    const double v = ((r + 0.5) / out_size - 0.5) * eh;
    for (int c = 0; c < out_size; ++c) {
      const double u = ((c + 0.5) / out_size - 0.5) * ew;
      // Rotate the sampling grid by -angle: with y pointing down this makes
      // the content appear rotated anti-clockwise.
      const double px = window.x + ca * u + sa * v;
      const double py = window.y - sa * u + ca * v;
      out.at(r, c) = scene.bilinear(px, py, fill);
    }
  }
  return out;
}

void save_pgm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_pgm: cannot open " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(img.width);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      double v = img.at(r, c);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      row[c] = (unsigned char)std::lround(v * 255.0);
    }
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

Image load_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_pgm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw std::runtime_error("load_pgm: not a P5 PGM: " + path);
  int w = 0, h = 0, maxv = 0;
  f >> w >> h >> maxv;
  if (w <= 0 || h <= 0 || maxv != 255) throw std::runtime_error("load_pgm: bad header: " + path);
  f.get();  // single whitespace after header
  Image img(w, h);
  std::vector<unsigned char> buf(size_t(w) * h);
  f.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!f) throw std::runtime_error("load_pgm: truncated data: " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

}  // namespace reldet
