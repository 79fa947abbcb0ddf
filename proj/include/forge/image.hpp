#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace forge {

// Grayscale image, intensities in [0,1], row-major.
struct Image {
  int h = 0;
  int w = 0;
  std::vector<double> px;

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), px(static_cast<size_t>(h_) * w_, 0.0) {}

  double& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
  double at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
};

// 8-bit quantization used for all on-disk images: round(intensity * 255),
// clamped to [0,255].
std::vector<uint8_t> image_to_bytes(const Image& img);
Image image_from_bytes(int h, int w, const std::vector<uint8_t>& bytes);

// Bilinear resample of the axis-aligned window [x0,x1)x[y0,y1) (continuous
// pixel coordinates) into an out_h x out_w image. Samples outside the source
// are clamped to the border.
Image crop_resize(const Image& src, double x0, double y0, double x1, double y1, int out_h,
                  int out_w);

// 8-bit grayscale PNG codec (zlib-backed). Writing is deterministic:
// identical images yield identical bytes.
void write_png_gray8(const std::string& path, const Image& img);
Image read_png_gray8(const std::string& path);

}  // namespace forge
