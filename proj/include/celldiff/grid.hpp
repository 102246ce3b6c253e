#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace celldiff {

// Boundary handling for neighborhood sums. Zero: cells outside the array
// contribute 0. Replicate: the nearest edge cell is used (zero-flux).
enum class Boundary { Zero, Replicate };

// Dense multichannel 2-D array, row-major (channel, row, col), doubles.
struct Grid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Grid() = default;
  Grid(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {
    if (c <= 0 || h <= 0 || w <= 0)
      throw std::invalid_argument("Grid: dimensions must be positive");
  }

  static Grid like(const Grid& g, double fill = 0.0) {
    return Grid(g.channels, g.height, g.width, fill);
  }

  int size() const { return channels * height * width; }

  double& at(int c, int r, int col) {
    return data[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
  double at(int c, int r, int col) const {
    return data[(static_cast<std::size_t>(c) * height + r) * width + col];
  }

  double* channel(int c) {
    return data.data() + static_cast<std::size_t>(c) * height * width;
  }
  const double* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * height * width;
  }

  bool same_shape(const Grid& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
  }

  double sum() const {
    double s = 0.0;
    for (double v : data) s += v;
    return s;
  }

  std::string shape_str() const {
    return "(" + std::to_string(channels) + "," + std::to_string(height) +
           "," + std::to_string(width) + ")";
  }
};

inline void check_same_shape(const Grid& a, const Grid& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

}  // namespace celldiff
