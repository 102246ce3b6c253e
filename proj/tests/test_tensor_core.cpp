#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "celldiff/cellnn.hpp"
#include "celldiff/kernels.hpp"
#include "celldiff/rng.hpp"
#include "celldiff/tape.hpp"
#include "oracles.hpp"

using namespace celldiff;

namespace {

Grid random_grid(int c, int h, int w, Rng& rng, double lo = -1.0,
                 double hi = 1.0) {
  Grid g(c, h, w);
  rng.fill_uniform(g.data.data(), g.data.size(), lo, hi);
  return g;
}

Kernel random_kernel(int oc, int ic, int radius, Rng& rng) {
  Kernel k;
  k.out_ch = oc;
  k.in_ch = ic;
  k.radius = radius;
  k.w.resize(static_cast<std::size_t>(oc) * ic * (2 * radius + 1) *
             (2 * radius + 1));
  rng.fill_uniform(k.w.data(), k.w.size(), -1.0, 1.0);
  return k;
}

double max_abs_diff(const Grid& a, const Grid& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("identity kernel reproduces the grid") {
  Rng rng(1);
  Grid g = random_grid(1, 6, 7, rng);
  Kernel k;
  k.out_ch = k.in_ch = 1;
  k.radius = 1;
  k.w.assign(9, 0.0);
  k.w[4] = 1.0;
  Grid out = neighborhood_weighted_sum(g, k, Boundary::Zero);
  CHECK(max_abs_diff(out, g) == 0.0);
}

TEST_CASE("all-ones kernel counts the interior neighborhood") {
  Grid g(1, 5, 5, 1.0);
  Kernel k;
  k.out_ch = k.in_ch = 1;
  k.radius = 1;
  k.w.assign(9, 1.0);
  Grid out = neighborhood_weighted_sum(g, k, Boundary::Zero);
  CHECK(out.at(0, 2, 2) == doctest::Approx(9.0).epsilon(1e-15));
  CHECK(out.at(0, 0, 0) == doctest::Approx(4.0).epsilon(1e-15));  // corner
}

TEST_CASE("random grids match the direct-summation oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 8; ++trial) {
    const int oc = rng.uniform_int(1, 4), ic = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(3, 9), w = rng.uniform_int(3, 9);
    const int radius = rng.uniform_int(1, 2);
    const Boundary b = trial % 2 ? Boundary::Replicate : Boundary::Zero;
    Grid g = random_grid(ic, h, w, rng);
    Kernel k = random_kernel(oc, ic, radius, rng);
    Grid ours = neighborhood_weighted_sum(g, k, b);
    Grid ref = oracle::conv_direct(g, k.w, oc, ic, radius, b);
    CHECK(max_abs_diff(ours, ref) < 1e-12);
  }
}

TEST_CASE("neighborhood sum is linear") {
  Rng rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    Grid g1 = random_grid(2, 6, 6, rng);
    Grid g2 = random_grid(2, 6, 6, rng);
    Kernel k = random_kernel(3, 2, 1, rng);
    const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);
    Grid mix = Grid::like(g1);
    for (std::size_t i = 0; i < mix.data.size(); ++i)
      mix.data[i] = a * g1.data[i] + b * g2.data[i];
    Grid lhs = neighborhood_weighted_sum(mix, k, Boundary::Zero);
    Grid r1 = neighborhood_weighted_sum(g1, k, Boundary::Zero);
    Grid r2 = neighborhood_weighted_sum(g2, k, Boundary::Zero);
    double worst = 0.0;
    for (std::size_t i = 0; i < lhs.data.size(); ++i)
      worst = std::max(worst,
                       std::fabs(lhs.data[i] - (a * r1.data[i] + b * r2.data[i])));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("shape mismatches are rejected") {
  Grid g(2, 4, 4);
  Kernel k = {1, 3, 1, std::vector<double>(27, 0.0)};
  CHECK_THROWS_AS(neighborhood_weighted_sum(g, k, Boundary::Zero),
                  std::invalid_argument);
  Kernel bad = {1, 2, 1, std::vector<double>(5, 0.0)};
  CHECK_THROWS_AS(neighborhood_weighted_sum(g, bad, Boundary::Zero),
                  std::invalid_argument);
}

TEST_CASE("serial and OpenMP kernels are bit-identical") {
  Rng rng(13);
  for (int trial = 0; trial < 4; ++trial) {
    const int oc = 3, ic = 2, h = 17, w = 23, radius = 1;
    Grid g = random_grid(ic, h, w, rng);
    Kernel k = random_kernel(oc, ic, radius, rng);
    const Boundary b = trial % 2 ? Boundary::Replicate : Boundary::Zero;
    Grid a(oc, h, w), bb(oc, h, w);
    kernels::conv2d_serial(a.data.data(), g.data.data(), k.w.data(), oc, ic, h,
                           w, radius, b);
    kernels::conv2d_omp(bb.data.data(), g.data.data(), k.w.data(), oc, ic, h,
                        w, radius, b);
    CHECK(a.data == bb.data);

    Grid gout = random_grid(oc, h, w, rng);
    Grid gi1(ic, h, w), gi2(ic, h, w);
    kernels::conv2d_grad_input_serial(gi1.data.data(), gout.data.data(),
                                      k.w.data(), oc, ic, h, w, radius, b);
    kernels::conv2d_grad_input_omp(gi2.data.data(), gout.data.data(),
                                   k.w.data(), oc, ic, h, w, radius, b);
    CHECK(gi1.data == gi2.data);

    std::vector<double> gw1(k.w.size(), 0.0), gw2(k.w.size(), 0.0);
    kernels::conv2d_grad_weights_serial(gw1.data(), gout.data.data(),
                                        g.data.data(), oc, ic, h, w, radius, b);
    kernels::conv2d_grad_weights_omp(gw2.data(), gout.data.data(),
                                     g.data.data(), oc, ic, h, w, radius, b);
    CHECK(gw1 == gw2);
  }
}

TEST_CASE("backprop of linear and quadratic functionals") {
  ParamStore store;
  ParamId p = store.add("p", {3}, {1.0, 2.0, 3.0});

  Tape t1(&store);
  NodeId loss1 = t1.sum(t1.param(p));
  auto g1 = t1.backprop(loss1, {p});
  CHECK(g1[p] == std::vector<double>{1.0, 1.0, 1.0});

  Tape t2(&store);
  NodeId loss2 = t2.sum_sq(t2.param(p));
  auto g2 = t2.backprop(loss2, {p});
  CHECK(g2[p] == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("backprop errors: non-scalar loss and unregistered parameter") {
  ParamStore store;
  ParamId p = store.add("p", {2}, {1.0, 2.0});
  Tape t(&store);
  NodeId leaf = t.param(p);
  CHECK_THROWS_AS(t.backward(leaf), std::invalid_argument);
  NodeId loss = t.sum(leaf);
  CHECK_THROWS_AS(t.backprop(loss, {42}), std::invalid_argument);
}

TEST_CASE("full layer MSE gradient matches central finite differences") {
  ParamStore store;
  TemplateSet ts = TemplateSet::create(store, "t", 2, 2, 1);
  Rng rng(3);
  ts.randomize(store, rng);
  SolverConfig cfg;
  cfg.steps = 10;
  Grid u = random_grid(2, 8, 8, rng, -0.9, 0.9);
  Grid target = random_grid(2, 8, 8, rng, -0.5, 0.5);

  auto loss_value = [&]() {
    Tape tape(&store);
    NodeId out = record_integrate_layer(tape, tape.input(u), ts, cfg);
    return tape.scalar_value(tape.mse_against(out, target));
  };

  Tape tape(&store);
  NodeId out = record_integrate_layer(tape, tape.input(u), ts, cfg);
  NodeId loss = tape.mse_against(out, target);
  auto grads = tape.backprop(loss, {ts.feedback, ts.control, ts.bias});
  for (ParamId pid : {ts.feedback, ts.control, ts.bias}) {
    auto fd = finite_diff_param(store, pid, loss_value, 1e-4);
    CHECK(max_rel_error(grads[pid], fd) < 1e-4);
  }
}

TEST_CASE("finite_diff_gradient basics") {
  auto square = [](const std::vector<double>& p) { return p[0] * p[0]; };
  auto g = finite_diff_gradient(square, {3.0}, 1e-4);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-7));
  auto constant = [](const std::vector<double>&) { return 4.2; };
  auto gc = finite_diff_gradient(constant, {1.0, 2.0}, 1e-4);
  CHECK(std::fabs(gc[0]) < 1e-9);
  CHECK(std::fabs(gc[1]) < 1e-9);
  CHECK_THROWS_AS(finite_diff_gradient(square, {1.0}, 0.0),
                  std::invalid_argument);
}

TEST_CASE("tape replay is bit-identical and reusable") {
  ParamStore store;
  TemplateSet ts = TemplateSet::create(store, "t", 2, 2, 1);
  Rng rng(5);
  ts.randomize(store, rng);
  SolverConfig cfg;
  cfg.steps = 5;
  Grid u = random_grid(2, 5, 5, rng, -0.9, 0.9);

  Tape tape(&store);
  NodeId out = record_integrate_layer(tape, tape.input(u), ts, cfg);
  NodeId loss = tape.sum_sq(out);
  const std::vector<double> out_vals = tape.value(out);
  const double loss_val = tape.scalar_value(loss);
  tape.backward(loss);
  const auto grad1 = tape.param_gradient(ts.feedback);
  tape.replay();
  CHECK(tape.value(out) == out_vals);
  CHECK(tape.scalar_value(loss) == loss_val);
  // accumulators are re-zeroed per backward pass
  tape.backward(loss);
  CHECK(tape.param_gradient(ts.feedback) == grad1);
}

TEST_CASE("gradients flow through pooling, upsampling and concatenation") {
  ParamStore store;
  ParamId p = store.add("p", {1, 4, 4},
                        std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11,
                                            12, 13, 14, 15, 16});
  auto loss_value = [&]() {
    Tape t(&store);
    NodeId x = t.param(p);
    NodeId pooled = t.avg_pool2(x);
    NodeId up = t.upsample2(pooled);
    NodeId both = t.concat_channels(up, x);
    return t.scalar_value(t.sum_sq(both));
  };
  Tape t(&store);
  NodeId x = t.param(p);
  NodeId both = t.concat_channels(t.upsample2(t.avg_pool2(x)), x);
  auto grads = t.backprop(t.sum_sq(both), {p});
  auto fd = finite_diff_param(store, p, loss_value, 1e-5);
  CHECK(max_rel_error(grads[p], fd) < 1e-6);
}
