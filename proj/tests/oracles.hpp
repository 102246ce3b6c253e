#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive (quadruple loops, fine-step integrators) and must not
// share code with the library paths they check.

#include <cmath>
#include <functional>
#include <vector>

#include "celldiff/grid.hpp"
#include "celldiff/memristor.hpp"

namespace oracle {

using celldiff::Boundary;
using celldiff::Grid;

inline double sample_at(const Grid& g, int c, int r, int col, Boundary b) {
  if (b == Boundary::Zero) {
    if (r < 0 || r >= g.height || col < 0 || col >= g.width) return 0.0;
  } else {
    r = std::max(0, std::min(g.height - 1, r));
    col = std::max(0, std::min(g.width - 1, col));
  }
  return g.at(c, r, col);
}

// Direct quadruple-loop neighborhood sum.
inline Grid conv_direct(const Grid& g, const std::vector<double>& w, int out_ch,
                        int in_ch, int radius, Boundary b) {
  const int k = 2 * radius + 1;
  Grid out(out_ch, g.height, g.width);
  for (int oc = 0; oc < out_ch; ++oc)
    for (int r = 0; r < g.height; ++r)
      for (int c = 0; c < g.width; ++c) {
        double acc = 0.0;
        for (int ic = 0; ic < in_ch; ++ic)
          for (int kr = -radius; kr <= radius; ++kr)
            for (int kc = -radius; kc <= radius; ++kc)
              acc += w[((static_cast<std::size_t>(oc) * in_ch + ic) * k +
                        (kr + radius)) *
                           k +
                       (kc + radius)] *
                     sample_at(g, ic, r + kr, c + kc, b);
        out.at(oc, r, c) = acc;
      }
  return out;
}

// Explicit zero-flux heat stepper: x <- x + dt*lambda*(sum of clamped
// neighbors - 4x).
inline Grid heat_step(const Grid& x, double lambda, double dt) {
  Grid out = Grid::like(x);
  for (int r = 0; r < x.height; ++r)
    for (int c = 0; c < x.width; ++c) {
      const double n = sample_at(x, 0, r - 1, c, Boundary::Replicate);
      const double s = sample_at(x, 0, r + 1, c, Boundary::Replicate);
      const double w = sample_at(x, 0, r, c - 1, Boundary::Replicate);
      const double e = sample_at(x, 0, r, c + 1, Boundary::Replicate);
      out.at(0, r, c) =
          x.at(0, r, c) + dt * lambda * (n + s + w + e - 4.0 * x.at(0, r, c));
    }
  return out;
}

// Classic fourth-order Runge-Kutta over a flat state vector.
inline std::vector<double> rk4(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    std::vector<double> y, double dt, int steps) {
  const std::size_t n = y.size();
  for (int s = 0; s < steps; ++s) {
    const auto k1 = f(y);
    std::vector<double> tmp(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k1[i];
    const auto k2 = f(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k2[i];
    const auto k3 = f(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + dt * k3[i];
    const auto k4 = f(tmp);
    for (std::size_t i = 0; i < n; ++i)
      y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  return y;
}

}  // namespace oracle
