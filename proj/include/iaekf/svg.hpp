#pragma once

// Minimal static SVG charts: line plots with optional shaded bands, and
// violin plots with a median/quartile box.

#include <limits>
#include <string>
#include <vector>

namespace iaekf::svg {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
    double width = 1.5;
    double opacity = 1.0;
};

struct Band {
    std::vector<double> x;
    std::vector<double> lo;
    std::vector<double> hi;
    std::string color = "#1f77b4";
    double opacity = 0.25;
};

struct LinePlot {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    std::vector<Band> bands;
    bool log_y = false;
    /// Horizontal reference lines.
    std::vector<double> hlines;
};

struct ViolinPlot {
    std::string title;
    std::string y_label;
    std::vector<std::string> labels;
    std::vector<std::vector<double>> groups;
    /// Dashed reference line, e.g. the true value. NaN to omit.
    double reference = std::numeric_limits<double>::quiet_NaN();
};

std::string render(const LinePlot& plot, int width = 800, int height = 480);
std::string render(const ViolinPlot& plot, int width = 800, int height = 480);

}  // namespace iaekf::svg
