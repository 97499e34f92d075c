#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace permanence::report {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  // Optional whiskers (same length as x) drawn as vertical bars.
  std::vector<double> low;
  std::vector<double> high;
  bool markers = false;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  std::optional<std::pair<double, double>> y_range;
  std::vector<Series> series;
  int width = 760;
  int height = 480;
};

/// Self-contained SVG line chart. Non-finite points, and non-positive
/// points on log axes, are skipped. Output depends only on the input.
std::string render_svg(const Chart& chart);

}  // namespace permanence::report
