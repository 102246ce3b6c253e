#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "celldiff/data_io.hpp"
#include "celldiff/denoiser.hpp"
#include "celldiff/rng.hpp"

namespace celldiff {

// Per-step corruption coefficients of the fixed forward chain.
struct NoiseSchedule {
  int chain_length = 0;
  std::vector<double> beta;       // beta[t-1], t = 1..T
  std::vector<double> alpha_bar;  // cumulative products of (1 - beta)

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar_at(int t) const {
    return alpha_bar.at(static_cast<std::size_t>(t - 1));
  }
};

// Linear beta spacing; requires 0 < beta_min <= beta_max < 1.
NoiseSchedule make_schedule(int chain_length, double beta_min, double beta_max);

// Closed-form marginal of the chain: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
Grid forward_noise(const Grid& x0, int t, const Grid& eps,
                   const NoiseSchedule& s);

// A denoiser as a callable, so oracles can stand in for a trained network.
using DenoiseFn = std::function<Grid(const Grid& x_t, int t, int label)>;

// Noise-prediction objective: draws (t, eps) per item and returns the mean
// squared error between eps and the prediction, averaged over batch and
// pixels. Draw order: for each item, first t then the noise image.
double dm_loss(const DenoiseFn& net, const std::vector<const Grid*>& images,
               const std::vector<int>& labels, const NoiseSchedule& s,
               Rng& rng);

// Ancestral reverse loop from pure noise; output clipped to [-1, 1].
// label -1 samples unconditionally. Deterministic given the generator state.
std::vector<Grid> sample(const Denoiser& net, const NoiseSchedule& s, int n,
                         int label, Rng& rng);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  int chain_length = 400;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  void validate() const;
};

// Adam with bias correction; moments stored per parameter in registration
// order, which is also the update order.
struct AdamState {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step_count = 0;
  std::vector<std::vector<double>> m, v;

  void init(const ParamStore& store);
  void update(ParamStore& store,
              const std::vector<std::vector<double>>& grads);
};

struct LossRow {
  int epoch;
  int step;
  double loss;
};

// Owns the full training state so checkpoints can resume bit-exactly.
struct Trainer {
  Denoiser& net;
  TrainConfig cfg;
  NoiseSchedule schedule;
  AdamState adam;
  Rng rng;
  int epochs_done = 0;
  std::vector<LossRow> log;

  Trainer(Denoiser& net, const TrainConfig& cfg);

  // One optimizer step over a batch; returns the mean loss. Per-item
  // gradients may be computed by parallel workers; the reduction runs in
  // item order, so results do not depend on the worker count.
  double train_step(const std::vector<const Grid*>& images,
                    const std::vector<int>& labels);

  // Runs the remaining epochs (seeded shuffle per epoch). The hook, when
  // set, fires after every epoch (and once before the first).
  using EpochHook = std::function<void(int epoch, const Trainer&)>;
  void run(const Dataset& data, const EpochHook& hook = {});
};

// Training snapshot <-> generic checkpoint container.
Checkpoint make_checkpoint(const Trainer& trainer);
DenoiserConfig denoiser_config_from_checkpoint(const Checkpoint& ckpt);
TrainConfig train_config_from_checkpoint(const Checkpoint& ckpt);
// Restores parameters into a freshly built net; and optimizer/rng/epoch into
// the trainer when given.
void restore_denoiser(Denoiser& net, const Checkpoint& ckpt);
void restore_trainer(Trainer& trainer, const Checkpoint& ckpt);

}  // namespace celldiff
