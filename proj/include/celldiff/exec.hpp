#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "celldiff/grid.hpp"
#include "celldiff/kernels.hpp"
#include "celldiff/nonlin.hpp"
#include "celldiff/tape.hpp"

// Two interchangeable executors over the same layer-composition code:
// EagerExec evaluates values directly (inference, demos), TapeExec records
// the identical arithmetic on a Tape (training). Forward values agree
// bit-for-bit between the two.

namespace celldiff {

// step index, cell state, optional second state (memristor), called once per
// integration step by the integrators.
using StepObserver = std::function<void(int, const Grid&, const Grid*)>;

struct EagerExec {
  using V = Grid;
  const ParamStore& ps;
  StepObserver observer;

  explicit EagerExec(const ParamStore& store) : ps(store) {}

  V input(const Grid& g) const { return g; }
  V input_vec(const std::vector<double>& v) const {
    Grid g(static_cast<int>(v.size()), 1, 1);
    g.data = v;
    return g;
  }
  V zeros(int c, int h, int w) const { return Grid(c, h, w); }

  V conv(const V& x, ParamId w, int radius, Boundary b) const {
    const auto& e = ps.at(w);
    if (e.shape.size() != 4 || e.shape[1] != x.channels ||
        e.shape[2] != 2 * radius + 1 || e.shape[3] != 2 * radius + 1)
      throw std::invalid_argument("conv: kernel '" + e.name +
                                  "' does not match input " + x.shape_str());
    Grid out(e.shape[0], x.height, x.width);
    kernels::conv2d(out.data.data(), x.data.data(), e.value.data(), e.shape[0],
                    e.shape[1], x.height, x.width, radius, b);
    return out;
  }

  V bias_param(ParamId z) const {
    const auto& e = ps.at(z);
    Grid g(static_cast<int>(e.value.size()), 1, 1);
    g.data = e.value;
    return g;
  }

  V channel_bias(const V& x, const V& z) const {
    if (z.size() != x.channels)
      throw std::invalid_argument("channel_bias: bias length mismatch");
    Grid out = x;
    const std::size_t plane = static_cast<std::size_t>(x.height) * x.width;
    for (int c = 0; c < x.channels; ++c) {
      const double zc = z.data[static_cast<std::size_t>(c)];
      double* p = out.channel(c);
      for (std::size_t i = 0; i < plane; ++i) p[i] += zc;
    }
    return out;
  }

  V nonlin(const V& x, Nonlin kind, double alpha) const {
    Grid out = x;
    for (auto& v : out.data) v = apply_nonlin(v, kind, alpha);
    return out;
  }

  V add(const V& a, const V& b) const {
    check_same_shape(a, b, "add");
    Grid out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
  }

  V euler_step(const V& x, const V& ay, const V& k, double dt) const {
    Grid out = Grid::like(x);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = (1.0 - dt) * x.data[i] + dt * (ay.data[i] + k.data[i]);
    return out;
  }

  V avg_pool2(const V& x) const {
    Grid out(x.channels, x.height / 2, x.width / 2);
    for (int c = 0; c < x.channels; ++c)
      for (int r = 0; r < out.height; ++r)
        for (int q = 0; q < out.width; ++q)
          out.at(c, r, q) = 0.25 * (x.at(c, 2 * r, 2 * q) +
                                    x.at(c, 2 * r, 2 * q + 1) +
                                    x.at(c, 2 * r + 1, 2 * q) +
                                    x.at(c, 2 * r + 1, 2 * q + 1));
    return out;
  }

  V upsample2(const V& x) const {
    Grid out(x.channels, 2 * x.height, 2 * x.width);
    for (int c = 0; c < x.channels; ++c)
      for (int r = 0; r < out.height; ++r)
        for (int q = 0; q < out.width; ++q)
          out.at(c, r, q) = x.at(c, r / 2, q / 2);
    return out;
  }

  V concat_channels(const V& a, const V& b) const {
    if (a.height != b.height || a.width != b.width)
      throw std::invalid_argument("concat_channels: spatial shape mismatch");
    Grid out(a.channels + b.channels, a.height, a.width);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
  }

  V dense(ParamId w, const V& x, ParamId bias) const {
    const auto& we = ps.at(w);
    const int m = we.shape[0], n = we.shape[1];
    if (static_cast<std::size_t>(n) != x.data.size())
      throw std::invalid_argument("dense: input size mismatch");
    const auto& be = ps.at(bias);
    Grid out(m, 1, 1);
    for (int i = 0; i < m; ++i) {
      double acc = be.value[static_cast<std::size_t>(i)];
      const double* row = we.value.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) acc += row[j] * x.data[static_cast<std::size_t>(j)];
      out.data[static_cast<std::size_t>(i)] = acc;
    }
    return out;
  }

  double max_abs(const V& x) const { return x.max_abs(); }
  Grid materialize(const V& x) const { return x; }
  void observe(int step, const V& x, const V* m) const {
    if (observer) observer(step, x, m);
  }
};

struct TapeExec {
  using V = NodeId;
  Tape& tape;
  StepObserver observer;

  explicit TapeExec(Tape& t) : tape(t) {}

  V input(const Grid& g) const { return tape.input(g); }
  V input_vec(const std::vector<double>& v) const { return tape.input_vec(v); }
  V zeros(int c, int h, int w) const { return tape.zeros(c, h, w); }
  V conv(V x, ParamId w, int radius, Boundary b) const {
    return tape.conv2d(x, tape.param(w), radius, b);
  }
  V bias_param(ParamId z) const { return tape.param(z); }
  V channel_bias(V x, V z) const { return tape.channel_bias(x, z); }
  V nonlin(V x, Nonlin kind, double alpha) const {
    return tape.nonlin(x, kind, alpha);
  }
  V add(V a, V b) const { return tape.add(a, b); }
  V euler_step(V x, V ay, V k, double dt) const;
  V avg_pool2(V x) const { return tape.avg_pool2(x); }
  V upsample2(V x) const { return tape.upsample2(x); }
  V concat_channels(V a, V b) const { return tape.concat_channels(a, b); }
  V dense(ParamId w, V x, ParamId bias) const {
    return tape.dense(tape.param(w), x, tape.param(bias));
  }
  double max_abs(V x) const {
    double m = 0.0;
    for (double v : tape.value(x)) m = std::max(m, std::fabs(v));
    return m;
  }
  Grid materialize(V x) const { return tape.grid_value(x); }
  void observe(int step, V x, const V* m) const {
    if (!observer) return;
    if (m) {
      Grid mg = tape.grid_value(*m);
      observer(step, tape.grid_value(x), &mg);
    } else {
      observer(step, tape.grid_value(x), nullptr);
    }
  }
};

}  // namespace celldiff
