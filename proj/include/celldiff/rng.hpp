#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace celldiff {

// Single seeded generator per run; every random draw in the library flows
// through one of these. Distributions are constructed per call so the
// engine state alone captures the full RNG state (checkpoint-friendly).
struct Rng {
  std::mt19937_64 gen;

  explicit Rng(std::uint64_t seed = 0) : gen(seed) {}

  double uniform(double a, double b) {
    return std::uniform_real_distribution<double>(a, b)(gen);
  }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen); }
  int uniform_int(int lo, int hi) {  // inclusive
    return std::uniform_int_distribution<int>(lo, hi)(gen);
  }
  void fill_normal(double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = normal();
  }
  void fill_uniform(double* p, std::size_t n, double a, double b) {
    for (std::size_t i = 0; i < n; ++i) p[i] = uniform(a, b);
  }

  std::string state() const {
    std::ostringstream os;
    os << gen;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> gen;
  }
};

}  // namespace celldiff
