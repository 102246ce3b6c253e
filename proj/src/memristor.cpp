#include "celldiff/memristor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace celldiff {

namespace {

// Value with partials wrt the memristor voltage and state.
struct Dual {
  double v = 0.0, dv = 0.0, dm = 0.0;
};

Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.dv + b.dv, a.dm + b.dm}; }
Dual operator*(Dual a, Dual b) {
  return {a.v * b.v, a.dv * b.v + a.v * b.dv, a.dm * b.v + a.v * b.dm};
}
Dual operator*(double s, Dual a) { return {s * a.v, s * a.dv, s * a.dm}; }
Dual dual_exp(Dual a) {
  const double e = std::exp(a.v);
  return {e, e * a.dv, e * a.dm};
}
Dual dual_sinh(Dual a) {
  const double s = std::sinh(a.v), c = std::cosh(a.v);
  return {s, c * a.dv, c * a.dm};
}
Dual dual_recip(Dual a) {
  const double r = 1.0 / a.v;
  const double r2 = -r * r;
  return {r, r2 * a.dv, r2 * a.dm};
}
// Clamp with zero derivative outside the closed interval.
Dual dual_clamp(Dual a, double lo, double hi) {
  if (a.v < lo) return {lo, 0.0, 0.0};
  if (a.v > hi) return {hi, 0.0, 0.0};
  return a;
}
// v * exp(c * sqrt(|v|)); the product form has a finite derivative
// exp(c*sqrt(|v|)) * (1 + c*sqrt(|v|)/2) everywhere, including v = 0.
Dual dual_vexp_sqrt(Dual v, double c) {
  const double root = std::sqrt(std::fabs(v.v));
  const double e = std::exp(c * root);
  const double d = e * (1.0 + 0.5 * c * root);
  return {v.v * e, d * v.dv, d * v.dm};
}

Dual eval_current(Dual m, Dual vm, const TaoxParams& p) {
  Dual i{0.0, 0.0, 0.0};
  if (p.g_on != 0.0) i = i + p.g_on * (m * vm);
  if (p.g_off != 0.0) {
    Dual one_minus_m{1.0 - m.v, -m.dv, -m.dm};
    i = i + p.g_off * (one_minus_m * dual_vexp_sqrt(vm, p.g_arg));
  }
  return i;
}

Dual eval_rate(Dual m, Dual vm, Dual im, const TaoxParams& p) {
  Dual rate{0.0, 0.0, 0.0};
  // step(x) = 1 for x > 0 and 0 otherwise, so exactly one branch is live.
  if (vm.v < 0.0 && p.rate_off != 0.0) {
    Dual s = dual_sinh((1.0 / p.sigma_off) * vm);
    const double soff2 = p.state_off * p.state_off;
    const double dexp = 2.0 * soff2 / (m.v * m.v * m.v);
    Dual state_gate = dual_exp(
        Dual{-soff2 / (m.v * m.v), dexp * m.dv, dexp * m.dm});
    Dual denom = Dual{1.0, 0.0, 0.0} + p.power_beta * (im * vm);
    Dual power_gate = dual_exp(dual_clamp(dual_recip(denom), -50.0, 50.0));
    rate = rate + p.rate_off * (s * state_gate * power_gate);
  } else if (vm.v > 0.0 && p.rate_on != 0.0) {
    Dual s = dual_sinh((1.0 / p.sigma_on) * vm);
    Dual state_gate = dual_exp(Dual{-(m.v * m.v) / (p.state_on * p.state_on),
                                    -2.0 * m.v * m.dv / (p.state_on * p.state_on),
                                    -2.0 * m.v * m.dm / (p.state_on * p.state_on)});
    Dual power_gate =
        dual_exp(dual_clamp((1.0 / p.power_sigma) * (im * vm), -50.0, 50.0));
    rate = rate + p.rate_on * (s * state_gate * power_gate);
  }
  return rate;
}

}  // namespace

void TaoxParams::validate() const {
  if (sigma_off == 0.0 || sigma_on == 0.0)
    throw std::invalid_argument("TaoxParams: sigma values must be nonzero");
  if (state_off <= 0.0 || state_on <= 0.0)
    throw std::invalid_argument("TaoxParams: state scales must be positive");
  if (!(m_min > 0.0 && m_min < 1.0))
    throw std::invalid_argument("TaoxParams: m_min must lie in (0, 1)");
  if (m_init < m_min || m_init > 1.0)
    throw std::invalid_argument("TaoxParams: m_init must lie in [m_min, 1]");
  if (power_sigma == 0.0)
    throw std::invalid_argument("TaoxParams: power_sigma must be nonzero");
}

double taox_current(double m, double vm, const TaoxParams& p) {
  return eval_current(Dual{m, 0, 1}, Dual{vm, 1, 0}, p).v;
}

double taox_rate(double m, double vm, const TaoxParams& p) {
  Dual md{m, 0, 1}, vd{vm, 1, 0};
  return eval_rate(md, vd, eval_current(md, vd, p), p).v;
}

TaoxEval taox_eval(double m, double vm, const TaoxParams& p) {
  Dual md{m, 0, 1}, vd{vm, 1, 0};
  Dual i = eval_current(md, vd, p);
  Dual r = eval_rate(md, vd, i, p);
  return {i.v, r.v, i.dv, i.dm, r.dv, r.dm};
}

std::pair<Grid, Grid> mcellnn_rhs(const Grid& x, const Grid& m, const Grid& u,
                                  const TemplateSet& ts,
                                  const ParamStore& store, const TaoxParams& p,
                                  const SolverConfig& cfg, Boundary b) {
  check_same_shape(x, m, "mcellnn_rhs");
  p.validate();
  Grid dx = cellnn_rhs(x, u, ts, store, cfg, b);
  Grid dm = Grid::like(m);
  for (int i = 0; i < x.size(); ++i) {
    const double vm = x.data[static_cast<std::size_t>(i)];
    const double mv = m.data[static_cast<std::size_t>(i)];
    dx.data[static_cast<std::size_t>(i)] -= taox_current(mv, vm, p);
    dm.data[static_cast<std::size_t>(i)] = taox_rate(mv, vm, p);
  }
  return {std::move(dx), std::move(dm)};
}

namespace {

inline double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

struct StepPlanes {
  // out = (1-dt)x + dt((ay+k) - im); m' = clamp(m + dt*rate)
  // The partials below fully describe the cell-local Jacobian.
  double xn, mn;
  double px_dv, px_dm;  // d x' / d(vm), d x' / d(m)
  double pm_dv, pm_dm;  // d m' / d(vm), d m' / d(m)
};

StepPlanes mcellnn_cell(double x, double m, double ayk, double dt,
                        const TaoxParams& p) {
  const TaoxEval e = taox_eval(m, x, p);
  StepPlanes s;
  s.xn = (1.0 - dt) * x + dt * (ayk - e.im);
  const double pre = m + dt * e.rate;
  s.mn = clampd(pre, p.m_min, 1.0);
  const double gate = (pre >= p.m_min && pre <= 1.0) ? 1.0 : 0.0;
  s.px_dv = (1.0 - dt) - dt * e.dim_dv;
  s.px_dm = -dt * e.dim_dm;
  s.pm_dv = gate * dt * e.drate_dv;
  s.pm_dm = gate * (1.0 + dt * e.drate_dm);
  return s;
}

// Eager fused step over both state grids.
void mcellnn_step_eager(Grid& x, Grid& m, const Grid& ay, const Grid& k,
                        double dt, const TaoxParams& p) {
  Grid xn = Grid::like(x), mn = Grid::like(m);
  for (int i = 0; i < x.size(); ++i) {
    const std::size_t at = static_cast<std::size_t>(i);
    const StepPlanes s =
        mcellnn_cell(x.data[at], m.data[at], ay.data[at] + k.data[at], dt, p);
    xn.data[at] = s.xn;
    mn.data[at] = s.mn;
  }
  x = std::move(xn);
  m = std::move(mn);
}

std::pair<NodeId, NodeId> record_mcellnn_step(Tape& t, NodeId x, NodeId m,
                                              NodeId ay, NodeId k, double dt,
                                              const TaoxParams& p) {
  const bool ng = t.needs_grad(x) || t.needs_grad(m) || t.needs_grad(ay) ||
                  t.needs_grad(k);
  NodeId xn = t.make_node(t.dims(x), ng);
  NodeId mn = t.make_node(t.dims(x), ng);
  // Cell-local partials stashed by the forward pass for the adjoint sweep.
  NodeId px_dv = t.make_node(t.dims(x), false);
  NodeId px_dm = t.make_node(t.dims(x), false);
  NodeId pm_dv = t.make_node(t.dims(x), false);
  NodeId pm_dm = t.make_node(t.dims(x), false);
  t.record_op(
      [=](Tape& tp) {
        const auto& xv = tp.value(x);
        const auto& mv = tp.value(m);
        const auto& av = tp.value(ay);
        const auto& kv = tp.value(k);
        auto& xo = tp.value_mut(xn);
        auto& mo = tp.value_mut(mn);
        auto& a1 = tp.value_mut(px_dv);
        auto& a2 = tp.value_mut(px_dm);
        auto& a3 = tp.value_mut(pm_dv);
        auto& a4 = tp.value_mut(pm_dm);
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const StepPlanes s =
              mcellnn_cell(xv[i], mv[i], av[i] + kv[i], dt, p);
          xo[i] = s.xn;
          mo[i] = s.mn;
          a1[i] = s.px_dv;
          a2[i] = s.px_dm;
          a3[i] = s.pm_dv;
          a4[i] = s.pm_dm;
        }
      },
      [=](Tape& tp) {
        const auto& gx = tp.grad_mut(xn);
        const auto& gm = tp.grad_mut(mn);
        const auto& a1 = tp.value(px_dv);
        const auto& a2 = tp.value(px_dm);
        const auto& a3 = tp.value(pm_dv);
        const auto& a4 = tp.value(pm_dm);
        if (tp.needs_grad(x)) {
          auto& g = tp.grad_mut(x);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += gx[i] * a1[i] + gm[i] * a3[i];
        }
        if (tp.needs_grad(m)) {
          auto& g = tp.grad_mut(m);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += gx[i] * a2[i] + gm[i] * a4[i];
        }
        if (tp.needs_grad(ay)) {
          auto& g = tp.grad_mut(ay);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dt * gx[i];
        }
        if (tp.needs_grad(k)) {
          auto& g = tp.grad_mut(k);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dt * gx[i];
        }
      });
  return {xn, mn};
}

// Thin dispatch so integrate_mcellnn can stay executor-generic.
void mcellnn_step(EagerExec&, Grid& x, Grid& m, const Grid& ay, const Grid& k,
                  double dt, const TaoxParams& p) {
  mcellnn_step_eager(x, m, ay, k, dt, p);
}

void mcellnn_step(TapeExec& ex, NodeId& x, NodeId& m, const NodeId& ay,
                  const NodeId& k, double dt, const TaoxParams& p) {
  auto [xn, mn] = record_mcellnn_step(ex.tape, x, m, ay, k, dt, p);
  x = xn;
  m = mn;
}

[[noreturn]] void diverged(int step) {
  throw std::runtime_error(
      "integration diverged (|state| > 1e6 or non-finite) at step " +
      std::to_string(step));
}

}  // namespace

template <class Ex>
typename Ex::V integrate_mcellnn(Ex& ex, const typename Ex::V& u,
                                 const TemplateSet& ts, const TaoxParams& p,
                                 const SolverConfig& cfg, Boundary b,
                                 typename Ex::V* extra_bias) {
  cfg.validate();
  p.validate();
  using V = typename Ex::V;
  V k = ex.conv(u, ts.control, ts.radius, b);
  V zb = ex.bias_param(ts.bias);
  if (extra_bias) zb = ex.add(zb, *extra_bias);
  k = ex.channel_bias(k, zb);
  V x;
  const Grid ug = ex.materialize(u);
  if (cfg.initial_state == SolverConfig::Init::CopyInput) {
    if (ts.state_channels != ts.input_channels)
      throw std::invalid_argument(
          "integrate: copy-input start needs matching channel counts");
    x = u;
  } else {
    x = ex.zeros(ts.state_channels, ug.height, ug.width);
  }
  V m = ex.input(Grid(ts.state_channels, ug.height, ug.width, p.m_init));
  ex.observe(0, x, &m);
  for (int step = 1; step <= cfg.steps; ++step) {
    V y = ex.nonlin(x, cfg.nonlinearity, cfg.alpha);
    V ay = ex.conv(y, ts.feedback, ts.radius, b);
    mcellnn_step(ex, x, m, ay, k, cfg.dt, p);
    if (!(ex.max_abs(x) <= 1e6)) diverged(step);
    ex.observe(step, x, &m);
  }
  return ex.nonlin(x, cfg.nonlinearity, cfg.alpha);
}

template Grid integrate_mcellnn<EagerExec>(EagerExec&, const Grid&,
                                           const TemplateSet&,
                                           const TaoxParams&,
                                           const SolverConfig&, Boundary,
                                           Grid*);
template NodeId integrate_mcellnn<TapeExec>(TapeExec&, const NodeId&,
                                            const TemplateSet&,
                                            const TaoxParams&,
                                            const SolverConfig&, Boundary,
                                            NodeId*);

Grid integrate_mlayer(const Grid& u, const TemplateSet& ts,
                      const ParamStore& store, const TaoxParams& p,
                      const SolverConfig& cfg, Boundary b,
                      const StepObserver& observer) {
  EagerExec ex(store);
  ex.observer = observer;
  return integrate_mcellnn(ex, u, ts, p, cfg, b, nullptr);
}

NodeId record_integrate_mlayer(Tape& tape, NodeId u, const TemplateSet& ts,
                               const TaoxParams& p, const SolverConfig& cfg,
                               Boundary b, NodeId extra_bias) {
  TapeExec ex(tape);
  return integrate_mcellnn(ex, u, ts, p, cfg, b,
                           extra_bias.valid() ? &extra_bias : nullptr);
}

std::vector<SweepSample> memristor_sweep(const TaoxParams& p, double amplitude,
                                         double frequency, int cycles,
                                         double dt) {
  p.validate();
  if (!(frequency > 0.0) || cycles < 1 || !(dt > 0.0))
    throw std::invalid_argument("memristor_sweep: invalid waveform");
  if (dt * frequency > 0.01)
    throw std::invalid_argument(
        "memristor_sweep: dt does not resolve the waveform "
        "(need >= 100 samples per cycle)");
  const double total = static_cast<double>(cycles) / frequency;
  const int steps = static_cast<int>(std::llround(total / dt));
  std::vector<SweepSample> trace;
  trace.reserve(static_cast<std::size_t>(steps) + 1);
  double m = p.m_init;
  constexpr double two_pi = 6.283185307179586476925286766559;
  for (int s = 0; s <= steps; ++s) {
    const double t = s * dt;
    const double v = amplitude * std::sin(two_pi * frequency * t);
    const double i = taox_current(m, v, p);
    trace.push_back({t, v, i, m});
    m = clampd(m + dt * taox_rate(m, v, p), p.m_min, 1.0);
  }
  return trace;
}

}  // namespace celldiff
