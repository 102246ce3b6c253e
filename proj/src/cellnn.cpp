#include "celldiff/cellnn.hpp"

#include <cmath>
#include <stdexcept>

#include "celldiff/rng.hpp"

namespace celldiff {

double output_nonlinearity(double x) { return saturating(x); }

Grid output_nonlinearity(const Grid& g) {
  Grid out = g;
  for (auto& v : out.data) v = saturating(v);
  return out;
}

double leaky_nonlinearity(double x, double alpha) { return leaky(x, alpha); }

Grid leaky_nonlinearity(const Grid& g, double alpha) {
  Grid out = g;
  for (auto& v : out.data) v = leaky(v, alpha);
  return out;
}

void SolverConfig::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("SolverConfig: dt must be > 0");
  if (steps < 1) throw std::invalid_argument("SolverConfig: steps must be >= 1");
  if (alpha < 0.0 || alpha >= 1.0)
    throw std::invalid_argument("SolverConfig: alpha must be in [0, 1)");
}

TemplateSet TemplateSet::create(ParamStore& store, const std::string& prefix,
                                int state_ch, int in_ch, int radius) {
  const int k = 2 * radius + 1;
  TemplateSet ts;
  ts.radius = radius;
  ts.state_channels = state_ch;
  ts.input_channels = in_ch;
  ts.feedback = store.add(
      prefix + ".feedback", {state_ch, state_ch, k, k},
      std::vector<double>(static_cast<std::size_t>(state_ch) * state_ch * k * k));
  ts.control = store.add(
      prefix + ".control", {state_ch, in_ch, k, k},
      std::vector<double>(static_cast<std::size_t>(state_ch) * in_ch * k * k));
  ts.bias = store.add(prefix + ".bias", {state_ch},
                      std::vector<double>(static_cast<std::size_t>(state_ch)));
  return ts;
}

void TemplateSet::randomize(ParamStore& store, Rng& rng) const {
  const int k = 2 * radius + 1;
  const double fan_a = static_cast<double>(state_channels) * k * k;
  const double fan_b = static_cast<double>(input_channels) * k * k;
  auto& a = store.at(feedback).value;
  rng.fill_uniform(a.data(), a.size(), -0.1 / fan_a, 0.1 / fan_a);
  auto& b = store.at(control).value;
  const double sb = 1.0 / std::sqrt(fan_b);
  rng.fill_uniform(b.data(), b.size(), -sb, sb);
  auto& z = store.at(bias).value;
  rng.fill_uniform(z.data(), z.size(), -0.01, 0.01);
}

Grid neighborhood_weighted_sum(const Grid& g, const Kernel& k, Boundary b) {
  const int kd = 2 * k.radius + 1;
  if (k.in_ch != g.channels)
    throw std::invalid_argument(
        "neighborhood_weighted_sum: kernel expects " + std::to_string(k.in_ch) +
        " channels, grid has " + std::to_string(g.channels));
  if (k.w.size() !=
      static_cast<std::size_t>(k.out_ch) * k.in_ch * kd * kd)
    throw std::invalid_argument(
        "neighborhood_weighted_sum: kernel size does not match radius");
  Grid out(k.out_ch, g.height, g.width);
  kernels::conv2d(out.data.data(), g.data.data(), k.w.data(), k.out_ch,
                  k.in_ch, g.height, g.width, k.radius, b);
  return out;
}

Grid cellnn_rhs(const Grid& x, const Grid& u, const TemplateSet& ts,
                const ParamStore& store, const SolverConfig& cfg, Boundary b) {
  if (x.channels != ts.state_channels || u.channels != ts.input_channels ||
      x.height != u.height || x.width != u.width)
    throw std::invalid_argument("cellnn_rhs: state/input shape mismatch");
  EagerExec ex(store);
  Grid y = ex.nonlin(x, cfg.nonlinearity, cfg.alpha);
  Grid ay = ex.conv(y, ts.feedback, ts.radius, b);
  Grid bu = ex.conv(u, ts.control, ts.radius, b);
  Grid out = Grid::like(x);
  const auto& z = store.at(ts.bias).value;
  const std::size_t plane = static_cast<std::size_t>(x.height) * x.width;
  for (int c = 0; c < x.channels; ++c) {
    const double zc = z[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t at = c * plane + i;
      out.data[at] = -x.data[at] + ay.data[at] + bu.data[at] + zc;
    }
  }
  return out;
}

NodeId record_euler_step(Tape& tape, NodeId x, NodeId ay, NodeId k, double dt) {
  if (tape.dims(x) != tape.dims(ay) || tape.dims(x) != tape.dims(k))
    throw std::invalid_argument("euler_step: shape mismatch");
  const bool ng =
      tape.needs_grad(x) || tape.needs_grad(ay) || tape.needs_grad(k);
  NodeId out = tape.make_node(tape.dims(x), ng);
  tape.record_op(
      [=](Tape& t) {
        const auto& xv = t.value(x);
        const auto& av = t.value(ay);
        const auto& kv = t.value(k);
        auto& ov = t.value_mut(out);
        for (std::size_t i = 0; i < ov.size(); ++i)
          ov[i] = (1.0 - dt) * xv[i] + dt * (av[i] + kv[i]);
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        if (t.needs_grad(x)) {
          auto& gx = t.grad_mut(x);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (1.0 - dt) * g[i];
        }
        if (t.needs_grad(ay)) {
          auto& ga = t.grad_mut(ay);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dt * g[i];
        }
        if (t.needs_grad(k)) {
          auto& gk = t.grad_mut(k);
          for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += dt * g[i];
        }
      });
  return out;
}

namespace {

[[noreturn]] void diverged(int step) {
  throw std::runtime_error(
      "integration diverged (|state| > 1e6 or non-finite) at step " +
      std::to_string(step));
}

}  // namespace

template <class Ex>
typename Ex::V integrate_cellnn(Ex& ex, const typename Ex::V& u,
                                const TemplateSet& ts, const SolverConfig& cfg,
                                Boundary b, typename Ex::V* extra_bias) {
  cfg.validate();
  using V = typename Ex::V;
  V k = ex.conv(u, ts.control, ts.radius, b);
  V zb = ex.bias_param(ts.bias);
  if (extra_bias) zb = ex.add(zb, *extra_bias);
  k = ex.channel_bias(k, zb);
  V x;
  if (cfg.initial_state == SolverConfig::Init::CopyInput) {
    if (ts.state_channels != ts.input_channels)
      throw std::invalid_argument(
          "integrate: copy-input start needs matching channel counts");
    x = u;
  } else {
    const Grid ug = ex.materialize(u);
    x = ex.zeros(ts.state_channels, ug.height, ug.width);
  }
  ex.observe(0, x, nullptr);
  for (int step = 1; step <= cfg.steps; ++step) {
    V y = ex.nonlin(x, cfg.nonlinearity, cfg.alpha);
    V ay = ex.conv(y, ts.feedback, ts.radius, b);
    x = ex.euler_step(x, ay, k, cfg.dt);
    if (!(ex.max_abs(x) <= 1e6)) diverged(step);
    ex.observe(step, x, nullptr);
  }
  return ex.nonlin(x, cfg.nonlinearity, cfg.alpha);
}

template Grid integrate_cellnn<EagerExec>(EagerExec&, const Grid&,
                                          const TemplateSet&,
                                          const SolverConfig&, Boundary,
                                          Grid*);
template NodeId integrate_cellnn<TapeExec>(TapeExec&, const NodeId&,
                                           const TemplateSet&,
                                           const SolverConfig&, Boundary,
                                           NodeId*);

NodeId TapeExec::euler_step(NodeId x, NodeId ay, NodeId k, double dt) const {
  return record_euler_step(tape, x, ay, k, dt);
}

Grid integrate_layer(const Grid& u, const TemplateSet& ts,
                     const ParamStore& store, const SolverConfig& cfg,
                     Boundary b, const StepObserver& observer) {
  EagerExec ex(store);
  ex.observer = observer;
  return integrate_cellnn(ex, u, ts, cfg, b, nullptr);
}

NodeId record_integrate_layer(Tape& tape, NodeId u, const TemplateSet& ts,
                              const SolverConfig& cfg, Boundary b,
                              NodeId extra_bias) {
  TapeExec ex(tape);
  return integrate_cellnn(ex, u, ts, cfg, b,
                          extra_bias.valid() ? &extra_bias : nullptr);
}

Grid conv_equivalent(const Grid& u, const Kernel& control,
                     const std::vector<double>& bias, Nonlin kind,
                     double alpha) {
  if (bias.size() != static_cast<std::size_t>(control.out_ch))
    throw std::invalid_argument("conv_equivalent: bias length mismatch");
  Grid s = neighborhood_weighted_sum(u, control, Boundary::Zero);
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (int c = 0; c < s.channels; ++c) {
    const double zc = bias[static_cast<std::size_t>(c)];
    double* p = s.channel(c);
    for (std::size_t i = 0; i < plane; ++i)
      p[i] = apply_nonlin(p[i] + zc, kind, alpha);
  }
  return s;
}

std::vector<Grid> heat_diffusion_demo(const Grid& x0, double lambda, int steps,
                                      double dt) {
  if (x0.channels != 1)
    throw std::invalid_argument("heat demo: single-channel grids only");
  if (x0.max_abs() > 1.0)
    throw std::invalid_argument("heat demo: |x0| must stay within 1");
  if (!(lambda * dt <= 0.125))
    throw std::invalid_argument(
        "heat demo: stability bound violated (lambda*dt must be <= 1/8)");
  ParamStore store;
  TemplateSet ts = TemplateSet::create(store, "heat", 1, 1, 1);
  auto& a = store.at(ts.feedback).value;
  a[1] = lambda;             // N
  a[3] = lambda;             // W
  a[4] = 1.0 - 4.0 * lambda; // center
  a[5] = lambda;             // E
  a[7] = lambda;             // S
  SolverConfig cfg;
  cfg.dt = dt;
  cfg.steps = steps;
  cfg.nonlinearity = Nonlin::Saturating;
  cfg.initial_state = SolverConfig::Init::CopyInput;
  std::vector<Grid> trajectory;
  trajectory.reserve(static_cast<std::size_t>(steps) + 1);
  StepObserver collect = [&](int, const Grid& x, const Grid*) {
    trajectory.push_back(x);
  };
  integrate_layer(x0, ts, store, cfg, Boundary::Replicate, collect);
  return trajectory;
}

}  // namespace celldiff
