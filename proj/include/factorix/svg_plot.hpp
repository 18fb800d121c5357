#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace factorix::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  // Fixed y range when set (lo < hi); otherwise fitted to the data.
  double y_min = 0.0;
  double y_max = 0.0;
};

// Polylines, axes with ticks, and a legend.  The timestamp comment is the only
// non-deterministic byte range and is omitted when timestamp is false.
std::string render_svg(const LinePlot& plot, bool timestamp = true);
void write_svg(const LinePlot& plot, const std::filesystem::path& path, bool timestamp = true);

}  // namespace factorix::plot
