#pragma once

#include <string>
#include <vector>

#include "forge/image.hpp"

namespace forge::plot {

// One curve in a line plot. Shade 0 is black, 1 is white.
struct Series {
  std::string label;
  std::vector<double> y;
  double shade = 0.0;
};

// One labelled group of two bars (baseline vs variant).
struct BarGroup {
  std::string label;
  double baseline = 0.0;
  double variant = 0.0;
};

// 5x7 bitmap text, uppercased; unknown characters render as space. Exposed
// for tests.
void draw_text(Image& img, int x, int y, const std::string& text, double shade);

// Grayscale line plot with axes, tick labels, and a legend. Non-finite points
// break the polyline. Deterministic bytes for identical inputs.
Image render_line_plot(const std::string& title, const std::vector<Series>& series, int w = 720,
                       int h = 440);
void line_plot(const std::string& path, const std::string& title,
               const std::vector<Series>& series, int w = 720, int h = 440);

// Grouped two-bar chart with value labels.
Image render_bar_chart(const std::string& title, const std::string& baseline_name,
                       const std::string& variant_name, const std::vector<BarGroup>& groups,
                       int w = 720, int h = 440);
void bar_chart(const std::string& path, const std::string& title,
               const std::string& baseline_name, const std::string& variant_name,
               const std::vector<BarGroup>& groups, int w = 720, int h = 440);

}  // namespace forge::plot
