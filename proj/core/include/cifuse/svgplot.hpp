#pragma once

#include <string>
#include <vector>

namespace cifuse {

// Minimal line-chart writer for the CLI's plot command.
struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series);

}  // namespace cifuse
