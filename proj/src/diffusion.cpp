#include "celldiff/diffusion.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <omp.h>

namespace celldiff {

NoiseSchedule make_schedule(int chain_length, double beta_min, double beta_max) {
  if (chain_length < 1)
    throw std::invalid_argument("make_schedule: chain length must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw std::invalid_argument(
        "make_schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.chain_length = chain_length;
  s.beta.resize(static_cast<std::size_t>(chain_length));
  s.alpha_bar.resize(static_cast<std::size_t>(chain_length));
  double cum = 1.0;
  for (int t = 0; t < chain_length; ++t) {
    const double frac =
        chain_length > 1 ? static_cast<double>(t) / (chain_length - 1) : 0.0;
    const double b = beta_min + frac * (beta_max - beta_min);
    s.beta[static_cast<std::size_t>(t)] = b;
    cum *= (1.0 - b);
    s.alpha_bar[static_cast<std::size_t>(t)] = cum;
  }
  return s;
}

Grid forward_noise(const Grid& x0, int t, const Grid& eps,
                   const NoiseSchedule& s) {
  if (t < 1 || t > s.chain_length)
    throw std::invalid_argument("forward_noise: step out of range");
  check_same_shape(x0, eps, "forward_noise");
  const double ab = s.alpha_bar_at(t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  Grid out = Grid::like(x0);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = sa * x0.data[i] + sb * eps.data[i];
  return out;
}

double dm_loss(const DenoiseFn& net, const std::vector<const Grid*>& images,
               const std::vector<int>& labels, const NoiseSchedule& s,
               Rng& rng) {
  if (images.empty())
    throw std::invalid_argument("dm_loss: batch must be non-empty");
  if (images.size() != labels.size())
    throw std::invalid_argument("dm_loss: image/label count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Grid& x0 = *images[i];
    const int t = rng.uniform_int(1, s.chain_length);
    Grid eps = Grid::like(x0);
    rng.fill_normal(eps.data.data(), eps.data.size());
    const Grid x_t = forward_noise(x0, t, eps, s);
    const Grid pred = net(x_t, t, labels[i]);
    check_same_shape(pred, eps, "dm_loss");
    double acc = 0.0;
    for (std::size_t j = 0; j < eps.data.size(); ++j) {
      const double d = eps.data[j] - pred.data[j];
      acc += d * d;
    }
    total += acc / static_cast<double>(eps.data.size());
  }
  return total / static_cast<double>(images.size());
}

std::vector<Grid> sample(const Denoiser& net, const NoiseSchedule& s, int n,
                         int label, Rng& rng) {
  if (n < 0) throw std::invalid_argument("sample: count must be >= 0");
  if (net.cfg.chain_length != s.chain_length)
    throw std::invalid_argument(
        "sample: schedule length does not match the network configuration");
  std::vector<Grid> x;
  if (n == 0) return x;
  const int c = net.cfg.image_channels, hs = net.cfg.image_size;
  x.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Grid g(c, hs, hs);
    rng.fill_normal(g.data.data(), g.data.size());
    x.push_back(std::move(g));
  }
  std::vector<Grid> pred(static_cast<std::size_t>(n));
  for (int t = s.chain_length; t >= 1; --t) {
    const double beta = s.beta_at(t);
    const double ab = s.alpha_bar_at(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double eps_coef = beta / std::sqrt(1.0 - ab);
#pragma omp parallel for schedule(dynamic, 1)
    for (int i = 0; i < n; ++i)
      pred[static_cast<std::size_t>(i)] =
          net.predict(x[static_cast<std::size_t>(i)], t, label);
    // noise draws stay on the calling thread, item-major
    for (int i = 0; i < n; ++i) {
      Grid& xi = x[static_cast<std::size_t>(i)];
      const Grid& ei = pred[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < xi.data.size(); ++j)
        xi.data[j] = inv_sqrt_alpha * (xi.data[j] - eps_coef * ei.data[j]);
      if (t > 1) {
        const double sig = std::sqrt(beta);
        for (std::size_t j = 0; j < xi.data.size(); ++j)
          xi.data[j] += sig * rng.normal();
      }
    }
  }
  for (auto& g : x)
    for (auto& v : g.data) v = std::clamp(v, -1.0, 1.0);
  return x;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1)
    throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  if (!(learning_rate >= 0.0))
    throw std::invalid_argument("TrainConfig: learning rate must be >= 0");
  if (chain_length < 1)
    throw std::invalid_argument("TrainConfig: chain length must be >= 1");
}

void AdamState::init(const ParamStore& store) {
  m.clear();
  v.clear();
  for (const auto& e : store.entries) {
    m.emplace_back(e.value.size(), 0.0);
    v.emplace_back(e.value.size(), 0.0);
  }
  step_count = 0;
}

void AdamState::update(ParamStore& store,
                       const std::vector<std::vector<double>>& grads) {
  if (grads.size() != store.entries.size() || m.size() != grads.size())
    throw std::invalid_argument("AdamState: gradient layout mismatch");
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (std::size_t p = 0; p < grads.size(); ++p) {
    auto& val = store.entries[p].value;
    auto& mp = m[p];
    auto& vp = v[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < val.size(); ++i) {
      mp[i] = beta1 * mp[i] + (1.0 - beta1) * g[i];
      vp[i] = beta2 * vp[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = mp[i] / bc1;
      const double vhat = vp[i] / bc2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

Trainer::Trainer(Denoiser& net_, const TrainConfig& cfg_)
    : net(net_), cfg(cfg_), rng(cfg_.seed) {
  cfg.validate();
  if (net.cfg.chain_length != cfg.chain_length)
    throw std::invalid_argument(
        "Trainer: network chain_length differs from training config");
  schedule = make_schedule(cfg.chain_length, cfg.beta_min, cfg.beta_max);
  adam.lr = cfg.learning_rate;
  adam.init(net.params);
}

double Trainer::train_step(const std::vector<const Grid*>& images,
                           const std::vector<int>& labels) {
  const int b = static_cast<int>(images.size());
  if (b == 0) throw std::invalid_argument("train_step: empty batch");
  // all stochastic draws happen serially, item-major, before the workers
  std::vector<int> ts(static_cast<std::size_t>(b));
  std::vector<Grid> eps(static_cast<std::size_t>(b));
  std::vector<Grid> xts(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const Grid& x0 = *images[static_cast<std::size_t>(i)];
    ts[static_cast<std::size_t>(i)] = rng.uniform_int(1, schedule.chain_length);
    Grid e = Grid::like(x0);
    rng.fill_normal(e.data.data(), e.data.size());
    xts[static_cast<std::size_t>(i)] =
        forward_noise(x0, ts[static_cast<std::size_t>(i)], e, schedule);
    eps[static_cast<std::size_t>(i)] = std::move(e);
  }
  const int nparams = net.params.count();
  std::vector<std::vector<std::vector<double>>> item_grads(
      static_cast<std::size_t>(b));
  std::vector<double> losses(static_cast<std::size_t>(b));
#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < b; ++i) {
    Tape tape(&net.params);
    NodeId pred = net.record_predict(tape, xts[static_cast<std::size_t>(i)],
                                     ts[static_cast<std::size_t>(i)],
                                     labels[static_cast<std::size_t>(i)]);
    NodeId loss = tape.mse_against(pred, eps[static_cast<std::size_t>(i)]);
    losses[static_cast<std::size_t>(i)] = tape.scalar_value(loss);
    tape.backward(loss, 1.0 / static_cast<double>(b));
    auto& gs = item_grads[static_cast<std::size_t>(i)];
    gs.reserve(static_cast<std::size_t>(nparams));
    for (ParamId p = 0; p < nparams; ++p) gs.push_back(tape.param_gradient(p));
  }
  // fixed-order reduction: parameters outer, items inner
  std::vector<std::vector<double>> grads;
  grads.reserve(static_cast<std::size_t>(nparams));
  for (ParamId p = 0; p < nparams; ++p) {
    std::vector<double> acc(net.params.at(p).value.size(), 0.0);
    for (int i = 0; i < b; ++i) {
      const auto& g = item_grads[static_cast<std::size_t>(i)][static_cast<std::size_t>(p)];
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
    }
    grads.push_back(std::move(acc));
  }
  double loss = 0.0;
  for (int i = 0; i < b; ++i) loss += losses[static_cast<std::size_t>(i)];
  loss /= static_cast<double>(b);
  if (!std::isfinite(loss))
    throw std::runtime_error("training diverged: loss is not finite");
  adam.update(net.params, grads);
  return loss;
}

void Trainer::run(const Dataset& data, const EpochHook& hook) {
  if (data.count() == 0)
    throw std::invalid_argument("train: dataset must be non-empty");
  if (epochs_done == 0 && hook) hook(0, *this);
  for (int epoch = epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(data.count()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.gen);
    int step = 0;
    for (int at = 0; at < data.count(); at += cfg.batch_size) {
      const int hi = std::min(at + cfg.batch_size, data.count());
      std::vector<const Grid*> images;
      std::vector<int> labels;
      for (int i = at; i < hi; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        images.push_back(&data.images[static_cast<std::size_t>(idx)]);
        labels.push_back(data.labels[static_cast<std::size_t>(idx)]);
      }
      double loss;
      try {
        loss = train_step(images, labels);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " (epoch " +
                                 std::to_string(epoch) + ", step " +
                                 std::to_string(step) + ")");
      }
      log.push_back({epoch, step, loss});
      ++step;
    }
    epochs_done = epoch;
    if (hook) hook(epoch, *this);
  }
}

// ---------------------------------------------------------------------------
// checkpoint glue
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void push_kv(Checkpoint& c, const std::string& k, const std::string& v) {
  c.config.emplace_back(k, v);
}

std::string solver_init_name(SolverConfig::Init i) {
  return i == SolverConfig::Init::Zero ? "zero" : "copy-input";
}

std::string nonlin_name(Nonlin n) {
  return n == Nonlin::Saturating ? "saturating" : "leaky";
}

}  // namespace

Checkpoint make_checkpoint(const Trainer& trainer) {
  const Denoiser& net = trainer.net;
  Checkpoint ckpt;
  push_kv(ckpt, "kind", block_kind_name(net.cfg.kind));
  push_kv(ckpt, "base_features", std::to_string(net.cfg.base_features));
  push_kv(ckpt, "image_channels", std::to_string(net.cfg.image_channels));
  push_kv(ckpt, "image_size", std::to_string(net.cfg.image_size));
  push_kv(ckpt, "num_classes", std::to_string(net.cfg.num_classes));
  push_kv(ckpt, "time_embed_dim", std::to_string(net.cfg.time_embed_dim));
  push_kv(ckpt, "chain_length", std::to_string(net.cfg.chain_length));
  push_kv(ckpt, "solver.dt", fmt_double(net.cfg.solver.dt));
  push_kv(ckpt, "solver.steps", std::to_string(net.cfg.solver.steps));
  push_kv(ckpt, "solver.nonlinearity", nonlin_name(net.cfg.solver.nonlinearity));
  push_kv(ckpt, "solver.alpha", fmt_double(net.cfg.solver.alpha));
  push_kv(ckpt, "solver.initial_state",
          solver_init_name(net.cfg.solver.initial_state));
  push_kv(ckpt, "taox.rate_off", fmt_double(net.cfg.taox.rate_off));
  push_kv(ckpt, "taox.rate_on", fmt_double(net.cfg.taox.rate_on));
  push_kv(ckpt, "taox.sigma_off", fmt_double(net.cfg.taox.sigma_off));
  push_kv(ckpt, "taox.sigma_on", fmt_double(net.cfg.taox.sigma_on));
  push_kv(ckpt, "taox.state_off", fmt_double(net.cfg.taox.state_off));
  push_kv(ckpt, "taox.state_on", fmt_double(net.cfg.taox.state_on));
  push_kv(ckpt, "taox.power_beta", fmt_double(net.cfg.taox.power_beta));
  push_kv(ckpt, "taox.power_sigma", fmt_double(net.cfg.taox.power_sigma));
  push_kv(ckpt, "taox.g_on", fmt_double(net.cfg.taox.g_on));
  push_kv(ckpt, "taox.g_off", fmt_double(net.cfg.taox.g_off));
  push_kv(ckpt, "taox.g_arg", fmt_double(net.cfg.taox.g_arg));
  push_kv(ckpt, "taox.m_min", fmt_double(net.cfg.taox.m_min));
  push_kv(ckpt, "taox.m_init", fmt_double(net.cfg.taox.m_init));
  push_kv(ckpt, "train.epochs", std::to_string(trainer.cfg.epochs));
  push_kv(ckpt, "train.batch_size", std::to_string(trainer.cfg.batch_size));
  push_kv(ckpt, "train.learning_rate", fmt_double(trainer.cfg.learning_rate));
  push_kv(ckpt, "train.seed", std::to_string(trainer.cfg.seed));
  push_kv(ckpt, "train.beta_min", fmt_double(trainer.cfg.beta_min));
  push_kv(ckpt, "train.beta_max", fmt_double(trainer.cfg.beta_max));
  for (const auto& e : net.params.entries)
    ckpt.arrays.push_back({e.name, e.shape, e.value});
  for (std::size_t p = 0; p < trainer.adam.m.size(); ++p) {
    ckpt.arrays.push_back({"adam.m." + net.params.entries[p].name,
                           net.params.entries[p].shape, trainer.adam.m[p]});
    ckpt.arrays.push_back({"adam.v." + net.params.entries[p].name,
                           net.params.entries[p].shape, trainer.adam.v[p]});
  }
  ckpt.arrays.push_back(
      {"adam.step", {1}, {static_cast<double>(trainer.adam.step_count)}});
  ckpt.rng_state = trainer.rng.state();
  ckpt.epoch = static_cast<std::uint32_t>(trainer.epochs_done);
  return ckpt;
}

DenoiserConfig denoiser_config_from_checkpoint(const Checkpoint& ckpt) {
  DenoiserConfig cfg;
  cfg.kind = block_kind_from_name(ckpt.config_value("kind"));
  cfg.base_features = std::stoi(ckpt.config_value("base_features"));
  cfg.image_channels = std::stoi(ckpt.config_value("image_channels"));
  cfg.image_size = std::stoi(ckpt.config_value("image_size"));
  cfg.num_classes = std::stoi(ckpt.config_value("num_classes"));
  cfg.time_embed_dim = std::stoi(ckpt.config_value("time_embed_dim"));
  cfg.chain_length = std::stoi(ckpt.config_value("chain_length"));
  cfg.solver.dt = std::stod(ckpt.config_value("solver.dt"));
  cfg.solver.steps = std::stoi(ckpt.config_value("solver.steps"));
  cfg.solver.nonlinearity = ckpt.config_value("solver.nonlinearity") == "leaky"
                                ? Nonlin::Leaky
                                : Nonlin::Saturating;
  cfg.solver.alpha = std::stod(ckpt.config_value("solver.alpha"));
  cfg.solver.initial_state = ckpt.config_value("solver.initial_state") == "zero"
                                 ? SolverConfig::Init::Zero
                                 : SolverConfig::Init::CopyInput;
  cfg.taox.rate_off = std::stod(ckpt.config_value("taox.rate_off"));
  cfg.taox.rate_on = std::stod(ckpt.config_value("taox.rate_on"));
  cfg.taox.sigma_off = std::stod(ckpt.config_value("taox.sigma_off"));
  cfg.taox.sigma_on = std::stod(ckpt.config_value("taox.sigma_on"));
  cfg.taox.state_off = std::stod(ckpt.config_value("taox.state_off"));
  cfg.taox.state_on = std::stod(ckpt.config_value("taox.state_on"));
  cfg.taox.power_beta = std::stod(ckpt.config_value("taox.power_beta"));
  cfg.taox.power_sigma = std::stod(ckpt.config_value("taox.power_sigma"));
  cfg.taox.g_on = std::stod(ckpt.config_value("taox.g_on"));
  cfg.taox.g_off = std::stod(ckpt.config_value("taox.g_off"));
  cfg.taox.g_arg = std::stod(ckpt.config_value("taox.g_arg"));
  cfg.taox.m_min = std::stod(ckpt.config_value("taox.m_min"));
  cfg.taox.m_init = std::stod(ckpt.config_value("taox.m_init"));
  return cfg;
}

TrainConfig train_config_from_checkpoint(const Checkpoint& ckpt) {
  TrainConfig cfg;
  cfg.epochs = std::stoi(ckpt.config_value("train.epochs"));
  cfg.batch_size = std::stoi(ckpt.config_value("train.batch_size"));
  cfg.learning_rate = std::stod(ckpt.config_value("train.learning_rate"));
  cfg.seed = std::stoull(ckpt.config_value("train.seed"));
  cfg.chain_length = std::stoi(ckpt.config_value("chain_length"));
  cfg.beta_min = std::stod(ckpt.config_value("train.beta_min"));
  cfg.beta_max = std::stod(ckpt.config_value("train.beta_max"));
  return cfg;
}

void restore_denoiser(Denoiser& net, const Checkpoint& ckpt) {
  for (auto& e : net.params.entries) {
    const Checkpoint::Array* a = ckpt.find(e.name);
    if (!a || a->values.size() != e.value.size())
      throw std::runtime_error("checkpoint: missing or mismatched array '" +
                               e.name + "'");
    e.value = a->values;
  }
}

void restore_trainer(Trainer& trainer, const Checkpoint& ckpt) {
  restore_denoiser(trainer.net, ckpt);
  for (std::size_t p = 0; p < trainer.adam.m.size(); ++p) {
    const auto& name = trainer.net.params.entries[p].name;
    const Checkpoint::Array* am = ckpt.find("adam.m." + name);
    const Checkpoint::Array* av = ckpt.find("adam.v." + name);
    if (!am || !av)
      throw std::runtime_error("checkpoint: missing optimizer state for '" +
                               name + "'");
    trainer.adam.m[p] = am->values;
    trainer.adam.v[p] = av->values;
  }
  const Checkpoint::Array* st = ckpt.find("adam.step");
  if (!st || st->values.size() != 1)
    throw std::runtime_error("checkpoint: missing optimizer step counter");
  trainer.adam.step_count = static_cast<long>(st->values[0]);
  trainer.rng.restore(ckpt.rng_state);
  trainer.epochs_done = static_cast<int>(ckpt.epoch);
}

}  // namespace celldiff
