#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "celldiff/denoiser.hpp"

using namespace celldiff;

namespace {

DenoiserConfig tiny(BlockKind kind) {
  DenoiserConfig cfg;
  cfg.kind = kind;
  cfg.base_features = 4;
  cfg.image_size = 8;
  cfg.num_classes = 2;
  cfg.time_embed_dim = 8;
  cfg.chain_length = 25;
  cfg.solver.steps = 6;
  return cfg;
}

Grid random_input(const DenoiserConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Grid g(cfg.image_channels, cfg.image_size, cfg.image_size);
  rng.fill_normal(g.data.data(), g.data.size());
  return g;
}

}  // namespace

TEST_CASE("parameter count matches the closed form and is kind-invariant") {
  Rng rng(1);
  const std::size_t conv_count =
      build_denoiser(tiny(BlockKind::Conv), rng).parameter_count();
  CHECK(conv_count == expected_parameter_count(tiny(BlockKind::Conv)));
  Rng rng2(2);
  CHECK(build_denoiser(tiny(BlockKind::CellNN), rng2).parameter_count() ==
        conv_count);
  Rng rng3(3);
  CHECK(build_denoiser(tiny(BlockKind::MCellNN), rng3).parameter_count() ==
        conv_count);

  // paper-scale width at MNIST size, closed form again
  DenoiserConfig big = tiny(BlockKind::Conv);
  big.base_features = 128;
  big.image_size = 28;
  big.num_classes = 10;
  Rng rng4(4);
  CHECK(build_denoiser(big, rng4).parameter_count() ==
        expected_parameter_count(big));
}

TEST_CASE("misconfigured image size is rejected") {
  DenoiserConfig cfg = tiny(BlockKind::Conv);
  cfg.image_size = 10;  // not divisible by 4
  Rng rng(1);
  CHECK_THROWS_AS(build_denoiser(cfg, rng), std::invalid_argument);
}

TEST_CASE("output keeps the input shape and stays finite for every kind") {
  for (BlockKind kind :
       {BlockKind::Conv, BlockKind::CellNN, BlockKind::MCellNN}) {
    Rng rng(5);
    Denoiser net = build_denoiser(tiny(kind), rng);
    Grid x = random_input(net.cfg, 6);
    Grid out = net.predict(x, 10, 1);
    CHECK(out.channels == x.channels);
    CHECK(out.height == x.height);
    CHECK(out.width == x.width);
    CHECK(out.all_finite());
  }
}

TEST_CASE("prediction is a pure function: repeated calls agree bit-for-bit") {
  for (BlockKind kind :
       {BlockKind::Conv, BlockKind::CellNN, BlockKind::MCellNN}) {
    Rng rng(7);
    Denoiser net = build_denoiser(tiny(kind), rng);
    Grid x = random_input(net.cfg, 8);
    Grid a = net.predict(x, 5, 0);
    Grid b = net.predict(x, 5, 0);
    CHECK(a.data == b.data);
  }
}

TEST_CASE("eager and recorded prediction agree bit-for-bit") {
  for (BlockKind kind :
       {BlockKind::Conv, BlockKind::CellNN, BlockKind::MCellNN}) {
    Rng rng(9);
    Denoiser net = build_denoiser(tiny(kind), rng);
    Grid x = random_input(net.cfg, 10);
    Grid eager = net.predict(x, 7, 1);
    Tape tape(&net.params);
    Grid taped = tape.grid_value(net.record_predict(tape, x, 7, 1));
    CHECK(eager.data == taped.data);
  }
}

TEST_CASE("conditioning and time inputs change the prediction") {
  Rng rng(11);
  Denoiser net = build_denoiser(tiny(BlockKind::Conv), rng);
  Grid x = random_input(net.cfg, 12);
  Grid by_class0 = net.predict(x, 5, 0);
  Grid by_class1 = net.predict(x, 5, 1);
  Grid later = net.predict(x, 20, 0);
  CHECK(by_class0.data != by_class1.data);
  CHECK(by_class0.data != later.data);
}

TEST_CASE("full forward+backward yields finite gradients for every parameter") {
  for (BlockKind kind :
       {BlockKind::Conv, BlockKind::CellNN, BlockKind::MCellNN}) {
    Rng rng(13);
    Denoiser net = build_denoiser(tiny(kind), rng);
    Grid x = random_input(net.cfg, 14);
    Tape tape(&net.params);
    NodeId loss = tape.sum_sq(net.record_predict(tape, x, 3, 0));
    tape.backward(loss);
    for (ParamId p = 0; p < net.params.count(); ++p) {
      const auto g = tape.param_gradient(p);
      double norm = 0.0;
      for (double v : g) {
        REQUIRE(std::isfinite(v));
        norm += std::fabs(v);
      }
      // every parameter participates in the graph
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("sampled parameter subset matches finite differences per kind") {
  for (BlockKind kind :
       {BlockKind::Conv, BlockKind::CellNN, BlockKind::MCellNN}) {
    Rng rng(15);
    DenoiserConfig cfg = tiny(kind);
    cfg.solver.steps = 4;
    Denoiser net = build_denoiser(cfg, rng);
    Grid x = random_input(net.cfg, 16);
    auto loss_value = [&]() {
      Tape tape(&net.params);
      return tape.scalar_value(tape.sum_sq(net.record_predict(tape, x, 3, 1)));
    };
    Tape tape(&net.params);
    NodeId loss = tape.sum_sq(net.record_predict(tape, x, 3, 1));
    tape.backward(loss);
    // 20 coordinates spread over all parameter arrays
    Rng pick(17);
    const double h = 1e-5;
    for (int probe = 0; probe < 20; ++probe) {
      const ParamId pid = pick.uniform_int(0, net.params.count() - 1);
      auto& value = net.params.at(pid).value;
      const int at = pick.uniform_int(0, static_cast<int>(value.size()) - 1);
      const double keep = value[static_cast<std::size_t>(at)];
      value[static_cast<std::size_t>(at)] = keep + h;
      const double fp = loss_value();
      value[static_cast<std::size_t>(at)] = keep - h;
      const double fm = loss_value();
      value[static_cast<std::size_t>(at)] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = tape.param_gradient(pid)[static_cast<std::size_t>(at)];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-7});
      CHECK(std::fabs(fd - an) / denom < 1e-3);
    }
  }
}

TEST_CASE("time embedding is deterministic, bounded, and injective") {
  const int T = 50, dims = 8;
  std::set<std::vector<double>> seen;
  for (int t = 1; t <= T; ++t) {
    auto e1 = time_embedding(t, T, dims);
    auto e2 = time_embedding(t, T, dims);
    CHECK(e1 == e2);
    CHECK(static_cast<int>(e1.size()) == dims);
    for (double v : e1) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    seen.insert(e1);
  }
  CHECK(static_cast<int>(seen.size()) == T);
  CHECK_THROWS_AS(time_embedding(0, T, dims), std::invalid_argument);
  CHECK_THROWS_AS(time_embedding(T + 1, T, dims), std::invalid_argument);
}
