#pragma once

#include <string>
#include <vector>

namespace gpn::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<std::size_t> marks;  // indices drawn as dots
};

struct AxesSpec {
  std::string title, x_label, y_label;
  bool log_x = false;
};

/// Self-contained SVG line plot. Throws on an empty series list, non-finite
/// points, or non-positive x under a log axis.
void write_lineplot(const std::vector<Series>& series, const AxesSpec& axes,
                    const std::string& path);

}  // namespace gpn::svg
