#include "forge/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "forge/common.hpp"

namespace forge {

std::vector<uint8_t> image_to_bytes(const Image& img) {
  std::vector<uint8_t> out(img.px.size());
  for (size_t i = 0; i < img.px.size(); ++i) {
    double q = std::round(img.px[i] * 255.0);
    out[i] = static_cast<uint8_t>(std::clamp(q, 0.0, 255.0));
  }
  return out;
}

Image image_from_bytes(int h, int w, const std::vector<uint8_t>& bytes) {
  require(static_cast<size_t>(h) * w == bytes.size(), "shape_error", "byte count mismatch");
  Image img(h, w);
  for (size_t i = 0; i < bytes.size(); ++i) img.px[i] = bytes[i] / 255.0;
  return img;
}

Image crop_resize(const Image& src, double x0, double y0, double x1, double y1, int out_h,
                  int out_w) {
  require(src.h >= 1 && src.w >= 1, "shape_error", "crop_resize: empty source");
  require(x1 > x0 && y1 > y0, "shape_error", "crop_resize: empty window");
  require(out_h >= 1 && out_w >= 1, "shape_error", "crop_resize: empty output");
  Image out(out_h, out_w);
  const double sx = (x1 - x0) / out_w;
  const double sy = (y1 - y0) / out_h;
  for (int i = 0; i < out_h; ++i) {
    const double yc = y0 + (i + 0.5) * sy - 0.5;
    for (int j = 0; j < out_w; ++j) {
      const double xc = x0 + (j + 0.5) * sx - 0.5;
      const double fy = std::floor(yc);
      const double fx = std::floor(xc);
      const double ty = yc - fy;
      const double tx = xc - fx;
      const int y0i = std::clamp(static_cast<int>(fy), 0, src.h - 1);
      const int y1i = std::clamp(static_cast<int>(fy) + 1, 0, src.h - 1);
      const int x0i = std::clamp(static_cast<int>(fx), 0, src.w - 1);
      const int x1i = std::clamp(static_cast<int>(fx) + 1, 0, src.w - 1);
      const double top = src.at(y0i, x0i) * (1.0 - tx) + src.at(y0i, x1i) * tx;
      const double bot = src.at(y1i, x0i) * (1.0 - tx) + src.at(y1i, x1i) * tx;
      out.at(i, j) = top * (1.0 - ty) + bot * ty;
    }
  }
  return out;
}

namespace {

void put_u32_be(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

uint32_t get_u32_be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& data) {
  put_u32_be(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, out.data() + start, static_cast<uInt>(4 + data.size())));
  put_u32_be(out, crc);
}

uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace

void write_png_gray8(const std::string& path, const Image& img) {
  require(img.h >= 1 && img.w >= 1, "shape_error", "write_png_gray8: empty image");
  std::vector<uint8_t> pix = image_to_bytes(img);

  // Filter 0 (None) on every scanline; deterministic and simple.
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(img.h) * (img.w + 1));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pix.begin() + static_cast<size_t>(y) * img.w,
               pix.begin() + static_cast<size_t>(y + 1) * img.w);
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> zdata(bound);
  int rc = compress2(zdata.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
  require(rc == Z_OK, "png_error", "deflate failed");
  zdata.resize(bound);

  std::vector<uint8_t> out;
  const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.insert(out.end(), sig, sig + 8);

  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(img.w));
  put_u32_be(ihdr, static_cast<uint32_t>(img.h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // color type: grayscale
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", zdata);
  append_chunk(out, "IEND", {});

  FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, "io_error", "cannot open for writing: " + path);
  size_t n = std::fwrite(out.data(), 1, out.size(), f);
  std::fclose(f);
  require(n == out.size(), "io_error", "short write: " + path);
}

Image read_png_gray8(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, "io_error", "cannot open for reading: " + path);
  std::vector<uint8_t> buf;
  uint8_t tmp[65536];
  size_t n;
  while ((n = std::fread(tmp, 1, sizeof(tmp), f)) > 0) buf.insert(buf.end(), tmp, tmp + n);
  std::fclose(f);

  require(buf.size() >= 8, "png_error", "truncated file: " + path);
  const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  require(std::memcmp(buf.data(), sig, 8) == 0, "png_error", "bad signature: " + path);

  int w = 0, h = 0;
  std::vector<uint8_t> zdata;
  size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= buf.size() && !saw_iend) {
    uint32_t len = get_u32_be(buf.data() + pos);
    require(pos + 12 + len <= buf.size(), "png_error", "truncated chunk: " + path);
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    const uint8_t* data = buf.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      require(len == 13, "png_error", "bad IHDR");
      w = static_cast<int>(get_u32_be(data));
      h = static_cast<int>(get_u32_be(data + 4));
      require(data[8] == 8 && data[9] == 0, "png_error",
              "unsupported PNG (need 8-bit grayscale): " + path);
      require(data[12] == 0, "png_error", "interlaced PNG unsupported: " + path);
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      zdata.insert(zdata.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  require(saw_ihdr && w >= 1 && h >= 1, "png_error", "missing IHDR: " + path);
  require(!zdata.empty(), "png_error", "missing IDAT: " + path);

  const size_t stride = static_cast<size_t>(w) + 1;
  std::vector<uint8_t> raw(static_cast<size_t>(h) * stride);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int rc = uncompress(raw.data(), &raw_len, zdata.data(), static_cast<uLong>(zdata.size()));
  require(rc == Z_OK && raw_len == raw.size(), "png_error", "inflate failed: " + path);

  // Undo per-scanline filters (bytes-per-pixel = 1).
  std::vector<uint8_t> pix(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y) * stride];
    const uint8_t* src = raw.data() + static_cast<size_t>(y) * stride + 1;
    uint8_t* dst = pix.data() + static_cast<size_t>(y) * w;
    const uint8_t* up = y > 0 ? pix.data() + static_cast<size_t>(y - 1) * w : nullptr;
    for (int x = 0; x < w; ++x) {
      const int left = x > 0 ? dst[x - 1] : 0;
      const int above = up ? up[x] : 0;
      const int ul = (up && x > 0) ? up[x - 1] : 0;
      int val = src[x];
      switch (filter) {
        case 0: break;
        case 1: val += left; break;
        case 2: val += above; break;
        case 3: val += (left + above) / 2; break;
        case 4: val += paeth(left, above, ul); break;
        default: fail("png_error", "unknown filter type: " + path);
      }
      dst[x] = static_cast<uint8_t>(val & 0xFF);
    }
  }
  return image_from_bytes(h, w, pix);
}

}  // namespace forge
