#pragma once

#include "celldiff/grid.hpp"

namespace celldiff {

enum class Nonlin { Saturating, Leaky };

// Saturating cell output: clamp to [-1, 1]; the piecewise-linear form of
// 0.5|x+1| - 0.5|x-1|, exact in the linear region.
inline double saturating(double x) { return x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x); }

// Subgradient 1 on the closed interval [-1, 1], 0 outside.
inline double saturating_deriv(double x) {
  return (x >= -1.0 && x <= 1.0) ? 1.0 : 0.0;
}

// Leaky variant: slope alpha outside [-1, 1], identity inside.
inline double leaky(double x, double alpha) {
  if (x < -1.0) return -1.0 + alpha * (x + 1.0);
  if (x > 1.0) return 1.0 + alpha * (x - 1.0);
  return x;
}

inline double leaky_deriv(double x, double alpha) {
  return (x >= -1.0 && x <= 1.0) ? 1.0 : alpha;
}

inline double apply_nonlin(double x, Nonlin kind, double alpha) {
  return kind == Nonlin::Saturating ? saturating(x) : leaky(x, alpha);
}

inline double apply_nonlin_deriv(double x, Nonlin kind, double alpha) {
  return kind == Nonlin::Saturating ? saturating_deriv(x)
                                    : leaky_deriv(x, alpha);
}

}  // namespace celldiff
