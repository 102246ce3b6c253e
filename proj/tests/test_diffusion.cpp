#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "celldiff/diffusion.hpp"

using namespace celldiff;

namespace {

DenoiserConfig tiny_config(BlockKind kind = BlockKind::Conv) {
  DenoiserConfig cfg;
  cfg.kind = kind;
  cfg.base_features = 4;
  cfg.image_size = 8;
  cfg.num_classes = 2;
  cfg.time_embed_dim = 8;
  cfg.chain_length = 20;
  cfg.solver.steps = 5;
  return cfg;
}

}  // namespace

TEST_CASE("schedule construction and closed forms") {
  NoiseSchedule s1 = make_schedule(1, 0.1, 0.1);
  CHECK(s1.alpha_bar_at(1) == doctest::Approx(0.9).epsilon(1e-15));

  // constant beta: alpha_bar_t = (1-b)^t exactly
  NoiseSchedule sc = make_schedule(50, 0.02, 0.02);
  double cum = 1.0;
  for (int t = 1; t <= 50; ++t) {
    cum *= (1.0 - 0.02);
    CHECK(sc.alpha_bar_at(t) == doctest::Approx(cum).epsilon(1e-14));
  }

  // default schedule: strictly decreasing alpha_bar, monotone beta, and the
  // frozen end value from an independent 40-digit product
  NoiseSchedule sd = make_schedule(400, 1e-4, 0.02);
  for (int t = 2; t <= 400; ++t) {
    CHECK(sd.alpha_bar_at(t) < sd.alpha_bar_at(t - 1));
    CHECK(sd.beta_at(t) >= sd.beta_at(t - 1));
  }
  CHECK(sd.alpha_bar_at(400) ==
        doctest::Approx(0.017472873372638712).epsilon(1e-12));

  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), std::invalid_argument);
}

TEST_CASE("forward noise: zero eps and near-identity limits") {
  NoiseSchedule s = make_schedule(100, 1e-6, 1e-6);
  Rng rng(1);
  Grid x0(1, 4, 4);
  rng.fill_uniform(x0.data.data(), x0.data.size(), -1.0, 1.0);
  Grid eps0(1, 4, 4, 0.0);
  Grid xt = forward_noise(x0, 50, eps0, s);
  const double sa = std::sqrt(s.alpha_bar_at(50));
  for (std::size_t i = 0; i < xt.data.size(); ++i)
    CHECK(xt.data[i] == doctest::Approx(sa * x0.data[i]).epsilon(1e-15));
  // tiny beta, tiny t: x_t ~ x0
  Grid eps(1, 4, 4, 0.3);
  Grid near = forward_noise(x0, 1, eps, s);
  for (std::size_t i = 0; i < near.data.size(); ++i)
    CHECK(std::fabs(near.data[i] - x0.data[i]) < 0.01);
  CHECK_THROWS_AS(forward_noise(x0, 0, eps0, s), std::invalid_argument);
  CHECK_THROWS_AS(forward_noise(x0, 101, eps0, s), std::invalid_argument);
}

TEST_CASE("forward-process statistics at t=T over many draws") {
  // zero-mean unit-variance x0, 10k samples: the marginal keeps mean 0 and
  // variance alpha_bar*1 + (1-alpha_bar) = 1
  NoiseSchedule s = make_schedule(400, 1e-4, 0.02);
  Rng rng(42);
  const int n = 10000;
  double sum = 0.0, sum2 = 0.0;
  Grid x0(1, 1, 1), eps(1, 1, 1);
  for (int i = 0; i < n; ++i) {
    x0.data[0] = rng.normal();
    eps.data[0] = rng.normal();
    const double v = forward_noise(x0, 400, eps, s).data[0];
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::fabs(mean) < 0.05);
  CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("dm_loss: oracle denoiser scores zero, zero net scores about one") {
  NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  Rng data_rng(7);
  std::vector<Grid> imgs;
  for (int i = 0; i < 4; ++i) {
    Grid g(1, 6, 6);
    data_rng.fill_uniform(g.data.data(), g.data.size(), -1.0, 1.0);
    imgs.push_back(std::move(g));
  }
  std::vector<const Grid*> ptrs;
  for (const auto& g : imgs) ptrs.push_back(&g);
  std::vector<int> labels(4, 0);

  // oracle: recompute the same (t, eps) sequence and return eps exactly
  {
    Rng probe(99);
    std::vector<Grid> epses;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      (void)probe.uniform_int(1, s.chain_length);
      Grid e = Grid::like(imgs[i]);
      probe.fill_normal(e.data.data(), e.data.size());
      epses.push_back(std::move(e));
    }
    std::size_t at = 0;
    DenoiseFn oracle_net = [&](const Grid&, int, int) { return epses.at(at++); };
    Rng rng(99);
    CHECK(dm_loss(oracle_net, ptrs, labels, s, rng) == 0.0);
  }
  {
    DenoiseFn zero_net = [](const Grid& x, int, int) { return Grid::like(x); };
    Rng rng(5);
    double acc = 0.0;
    const int reps = 80;  // 80*4*36 = 11520 pixel draws
    for (int r = 0; r < reps; ++r) acc += dm_loss(zero_net, ptrs, labels, s, rng);
    const double mean = acc / reps;
    // eps is unit normal, so the expected per-pixel loss is 1; 3 sigma of
    // the mean of ~11.5k chi-square(1) draws is about 0.04
    CHECK(std::fabs(mean - 1.0) < 0.05);
    CHECK(mean >= 0.0);
  }
}

TEST_CASE("sampling is deterministic, clipped, and empty for n=0") {
  Rng build(3);
  DenoiserConfig dc = tiny_config();
  Denoiser net = build_denoiser(dc, build);
  NoiseSchedule s = make_schedule(dc.chain_length, 1e-4, 0.02);
  Rng r1(11), r2(11);
  auto a = sample(net, s, 3, 1, r1);
  auto b = sample(net, s, 3, 1, r2);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].data == b[i].data);
    for (double v : a[i].data) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
  Rng r3(11);
  CHECK(sample(net, s, 0, 0, r3).empty());
}

TEST_CASE("reverse loop with a zero net matches a standalone reference") {
  Rng build(3);
  DenoiserConfig dc = tiny_config();
  Denoiser net = build_denoiser(dc, build);
  // zero every parameter except the head bias: predictions are then a known
  // constant, exercising the full update arithmetic
  for (auto& e : net.params.entries) std::fill(e.value.begin(), e.value.end(), 0.0);
  NoiseSchedule s = make_schedule(dc.chain_length, 1e-4, 0.02);
  Rng rng(17);
  auto ours = sample(net, s, 2, 0, rng);

  // standalone reference loop, same draw discipline
  Rng ref_rng(17);
  const int n = 2, px = dc.image_size * dc.image_size;
  std::vector<std::vector<double>> x(static_cast<std::size_t>(n),
                                     std::vector<double>(static_cast<std::size_t>(px)));
  for (int i = 0; i < n; ++i) ref_rng.fill_normal(x[static_cast<std::size_t>(i)].data(), static_cast<std::size_t>(px));
  for (int t = s.chain_length; t >= 1; --t) {
    const double beta = s.beta_at(t);
    const double c = 1.0 / std::sqrt(1.0 - beta);
    for (int i = 0; i < n; ++i)
      for (auto& v : x[static_cast<std::size_t>(i)]) v = c * v;  // eps_hat == 0
    if (t > 1)
      for (int i = 0; i < n; ++i)
        for (auto& v : x[static_cast<std::size_t>(i)])
          v += std::sqrt(beta) * ref_rng.normal();
  }
  for (int i = 0; i < n; ++i)
    for (auto& v : x[static_cast<std::size_t>(i)]) v = std::clamp(v, -1.0, 1.0);
  for (int i = 0; i < n; ++i)
    CHECK(ours[static_cast<std::size_t>(i)].data == x[static_cast<std::size_t>(i)]);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  Rng build(5);
  DenoiserConfig dc = tiny_config();
  Denoiser net = build_denoiser(dc, build);
  const auto before = net.params.entries;
  Dataset data = make_toy_dataset("bars", 32, 8, 1);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.learning_rate = 0.0;
  tc.chain_length = dc.chain_length;
  Trainer trainer(net, tc);
  trainer.run(data);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(before[i].value == net.params.entries[i].value);
  CHECK(trainer.log.size() == 4);
}

TEST_CASE("training is reproducible and reduces the loss on the toy set") {
  auto run_once = [](std::uint64_t seed) {
    Rng build(seed);
    DenoiserConfig dc = tiny_config();
    dc.base_features = 8;
    Denoiser net = build_denoiser(dc, build);
    Dataset data = make_toy_dataset("bars", 128, 8, 9);
    TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 16;
    tc.learning_rate = 5e-3;
    tc.seed = seed;
    tc.chain_length = dc.chain_length;
    Trainer trainer(net, tc);
    trainer.run(data);
    return trainer.log;
  };
  auto log1 = run_once(123);
  auto log2 = run_once(123);
  REQUIRE(log1.size() == log2.size());
  for (std::size_t i = 0; i < log1.size(); ++i)
    CHECK(log1[i].loss == log2[i].loss);

  auto epoch_mean = [&](const std::vector<LossRow>& log, int epoch) {
    double acc = 0.0;
    int n = 0;
    for (const auto& row : log)
      if (row.epoch == epoch) {
        acc += row.loss;
        ++n;
      }
    return acc / n;
  };
  CHECK(epoch_mean(log1, 10) <= 0.5 * epoch_mean(log1, 1));
}

TEST_CASE("diverging training aborts with a diagnostic") {
  Rng build(5);
  DenoiserConfig dc = tiny_config();
  Denoiser net = build_denoiser(dc, build);
  Dataset data = make_toy_dataset("bars", 16, 8, 1);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  tc.learning_rate = 1e18;  // guaranteed blow-up
  tc.chain_length = dc.chain_length;
  Trainer trainer(net, tc);
  CHECK_THROWS_AS(trainer.run(data), std::runtime_error);
}

TEST_CASE("checkpoint round trip restores training exactly") {
  DenoiserConfig dc = tiny_config();
  Dataset data = make_toy_dataset("bars", 48, 8, 2);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 16;
  tc.learning_rate = 1e-3;
  tc.chain_length = dc.chain_length;

  // uninterrupted run
  Rng build1(7);
  Denoiser net1 = build_denoiser(dc, build1);
  Trainer t1(net1, tc);
  t1.run(data);

  // run two epochs, snapshot, resume in a fresh trainer
  Rng build2(7);
  Denoiser net2 = build_denoiser(dc, build2);
  TrainConfig tc2 = tc;
  tc2.epochs = 2;
  Trainer t2(net2, tc2);
  t2.run(data);
  Checkpoint ckpt = make_checkpoint(t2);

  Rng build3(99);  // deliberately different; the checkpoint must win
  Denoiser net3 = build_denoiser(denoiser_config_from_checkpoint(ckpt), build3);
  TrainConfig tc3 = train_config_from_checkpoint(ckpt);
  tc3.epochs = 4;
  Trainer t3(net3, tc3);
  restore_trainer(t3, ckpt);
  t3.run(data);

  std::vector<LossRow> tail;
  for (const auto& row : t1.log)
    if (row.epoch >= 3) tail.push_back(row);
  REQUIRE(tail.size() == t3.log.size());
  for (std::size_t i = 0; i < tail.size(); ++i)
    CHECK(tail[i].loss == t3.log[i].loss);
  for (std::size_t p = 0; p < net1.params.entries.size(); ++p)
    CHECK(net1.params.entries[p].value == net3.params.entries[p].value);
}
