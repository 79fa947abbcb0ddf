#include "forge/plot.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>

#include "forge/common.hpp"

namespace forge::plot {

namespace {

// 5x7 glyphs, one byte per row, low 5 bits used (MSB-left).
struct Glyph {
  char ch;
  uint8_t rows[7];
};

constexpr Glyph kFont[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
    {'%', {0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
    {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
    {'@', {0x0E, 0x11, 0x17, 0x15, 0x17, 0x10, 0x0E}},
};

const uint8_t* glyph(char c) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const Glyph& g : kFont) {
    if (g.ch == u) return g.rows;
  }
  return nullptr;  // renders as space
}

void put_px(Image& img, int x, int y, double shade) {
  if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
  img.at(y, x) = shade;
}

void draw_line(Image& img, double x0, double y0, double x1, double y1, double shade) {
  const double dx = x1 - x0, dy = y1 - y0;
  const int steps = std::max(1, static_cast<int>(std::ceil(std::max(std::abs(dx), std::abs(dy)))));
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    put_px(img, static_cast<int>(std::lround(x0 + t * dx)),
           static_cast<int>(std::lround(y0 + t * dy)), shade);
  }
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1, double shade) {
  for (int y = std::max(0, y0); y < std::min(img.h, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(img.w, x1); ++x) img.at(y, x) = shade;
  }
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

struct Range {
  double lo = 0.0, hi = 1.0;
};

Range value_range(const std::vector<Series>& series) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const Series& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(lo <= hi)) return {0.0, 1.0};
  if (lo == hi) {
    const double pad = std::max(1.0, std::abs(lo) * 0.1);
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

}  // namespace

void draw_text(Image& img, int x, int y, const std::string& text, double shade) {
  int cx = x;
  for (char c : text) {
    if (const uint8_t* rows = glyph(c)) {
      for (int r = 0; r < 7; ++r) {
        for (int k = 0; k < 5; ++k) {
          if (rows[r] & (1 << (4 - k))) put_px(img, cx + k, y + r, shade);
        }
      }
    }
    cx += 6;
  }
}

Image render_line_plot(const std::string& title, const std::vector<Series>& series, int w,
                       int h) {
  require(!series.empty(), "plot_error", "line plot needs at least one series");
  require(w >= 160 && h >= 120, "plot_error", "plot canvas too small");
  Image img(h, w);
  std::fill(img.px.begin(), img.px.end(), 1.0);

  const int left = 56, right = w - 14, top = 26, bottom = h - 30;
  draw_text(img, 8, 8, title, 0.0);

  const Range r = value_range(series);
  auto to_y = [&](double v) {
    return bottom - (v - r.lo) / (r.hi - r.lo) * (bottom - top);
  };

  // Horizontal grid + tick labels at 5 levels.
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = r.lo + (r.hi - r.lo) * tick / 4.0;
    const int y = static_cast<int>(std::lround(to_y(v)));
    draw_line(img, left, y, right, y, tick == 0 ? 0.0 : 0.85);
    draw_text(img, 4, y - 3, format_value(v), 0.25);
  }
  draw_line(img, left, top, left, bottom, 0.0);

  size_t max_n = 0;
  for (const Series& s : series) max_n = std::max(max_n, s.y.size());
  draw_text(img, left, bottom + 6, "0", 0.25);
  if (max_n > 1) {
    const std::string last = std::to_string(max_n - 1);
    draw_text(img, right - static_cast<int>(last.size()) * 6, bottom + 6, last, 0.25);
  }

  auto to_x = [&](size_t i, size_t n) {
    if (n <= 1) return 0.5 * (left + right);
    return left + static_cast<double>(i) / (n - 1) * (right - left);
  };

  for (const Series& s : series) {
    for (size_t i = 1; i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i - 1]) || !std::isfinite(s.y[i])) continue;
      draw_line(img, to_x(i - 1, s.y.size()), to_y(s.y[i - 1]), to_x(i, s.y.size()),
                to_y(s.y[i]), s.shade);
    }
    if (s.y.size() == 1 && std::isfinite(s.y[0])) {
      put_px(img, static_cast<int>(to_x(0, 1)), static_cast<int>(to_y(s.y[0])), s.shade);
    }
  }

  // Legend, top-right, one row per series.
  int ly = top + 4;
  for (const Series& s : series) {
    const int lx = right - 150;
    draw_line(img, lx, ly + 3, lx + 16, ly + 3, s.shade);
    draw_text(img, lx + 22, ly, s.label, 0.0);
    ly += 11;
  }
  return img;
}

void line_plot(const std::string& path, const std::string& title,
               const std::vector<Series>& series, int w, int h) {
  write_png_gray8(path, render_line_plot(title, series, w, h));
}

Image render_bar_chart(const std::string& title, const std::string& baseline_name,
                       const std::string& variant_name, const std::vector<BarGroup>& groups,
                       int w, int h) {
  require(!groups.empty(), "plot_error", "bar chart needs at least one group");
  require(w >= 160 && h >= 120, "plot_error", "plot canvas too small");
  Image img(h, w);
  std::fill(img.px.begin(), img.px.end(), 1.0);

  const int left = 56, right = w - 14, top = 26, bottom = h - 42;
  draw_text(img, 8, 8, title, 0.0);

  double lo = 0.0, hi = 0.0;
  for (const BarGroup& g : groups) {
    lo = std::min({lo, g.baseline, g.variant});
    hi = std::max({hi, g.baseline, g.variant});
  }
  if (hi == lo) hi = lo + 1.0;
  hi += (hi - lo) * 0.12;  // headroom for value labels

  auto to_y = [&](double v) {
    return bottom - (v - lo) / (hi - lo) * (bottom - top);
  };
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = lo + (hi - lo) * tick / 4.0;
    const int y = static_cast<int>(std::lround(to_y(v)));
    draw_line(img, left, y, right, y, tick == 0 ? 0.0 : 0.85);
    draw_text(img, 4, y - 3, format_value(v), 0.25);
  }

  const double slot = static_cast<double>(right - left) / groups.size();
  const int bar_w = std::max(6, static_cast<int>(slot * 0.28));
  const int zero_y = static_cast<int>(std::lround(to_y(0.0)));
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const int cx = static_cast<int>(left + slot * (gi + 0.5));
    auto bar = [&](double v, int offset, double shade) {
      const int y = static_cast<int>(std::lround(to_y(v)));
      const int x0 = cx + offset;
      fill_rect(img, x0, std::min(y, zero_y), x0 + bar_w, std::max(y, zero_y) + 1, shade);
      const std::string label = format_value(v);
      draw_text(img, x0 + bar_w / 2 - static_cast<int>(label.size()) * 3,
                std::min(y, zero_y) - 9, label, 0.1);
    };
    bar(groups[gi].baseline, -bar_w - 2, 0.65);
    bar(groups[gi].variant, 2, 0.25);
    draw_text(img, cx - static_cast<int>(groups[gi].label.size()) * 3, bottom + 6,
              groups[gi].label, 0.0);
  }
  draw_line(img, left, zero_y, right, zero_y, 0.0);

  // Legend.
  fill_rect(img, left + 4, top + 2, left + 16, top + 9, 0.65);
  draw_text(img, left + 20, top + 1, baseline_name, 0.0);
  fill_rect(img, left + 4, top + 14, left + 16, top + 21, 0.25);
  draw_text(img, left + 20, top + 13, variant_name, 0.0);
  return img;
}

void bar_chart(const std::string& path, const std::string& title,
               const std::string& baseline_name, const std::string& variant_name,
               const std::vector<BarGroup>& groups, int w, int h) {
  write_png_gray8(path, render_bar_chart(title, baseline_name, variant_name, groups, w, h));
}

}  // namespace forge::plot
