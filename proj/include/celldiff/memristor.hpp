#pragma once

#include <utility>
#include <vector>

#include "celldiff/cellnn.hpp"
#include "celldiff/exec.hpp"
#include "celldiff/grid.hpp"
#include "celldiff/tape.hpp"

namespace celldiff {

// Constants of the TaOx rate law and memductance. The shipped defaults are
// illustrative desk-scale values chosen for stable dynamics at |v| ~ 1; see
// configs/taox_default.cfg.
struct TaoxParams {
  double rate_off = 1.0;    // 1/s amplitude of the off-switching branch (v < 0)
  double rate_on = 1.0;     // 1/s amplitude of the on-switching branch (v > 0)
  double sigma_off = 0.5;   // V
  double sigma_on = 0.5;    // V
  double state_off = 0.2;   // state scale of the off branch exponential
  double state_on = 0.7;    // state scale of the on branch exponential
  double power_beta = 1.0;  // 1/W, off-branch power feedback
  double power_sigma = 1.0; // W, on-branch power scale
  double g_on = 1.0;        // S, memductance at m = 1
  double g_off = 0.05;      // S, memductance scale at m = 0
  double g_arg = 0.5;       // 1/sqrt(V), voltage lift of the off conductance
  double m_min = 1e-3;      // lower clamp of the state
  double m_init = 0.5;      // initial state for layer integration

  void validate() const;
  // All current and rate contributions vanish identically.
  bool degenerate() const {
    return rate_off == 0.0 && rate_on == 0.0 && g_on == 0.0 && g_off == 0.0;
  }
};

// i = v * G(m, v) with G = g_on*m + g_off*exp(g_arg*sqrt(|v|))*(1-m).
double taox_current(double m, double vm, const TaoxParams& p);

// dm/dt: sinh-driven branches gated by the sign of v; both exponent
// arguments are clamped to [-50, 50] before exponentiation.
double taox_rate(double m, double vm, const TaoxParams& p);

// Value plus partials wrt (vm, m) of both the current and the rate.
struct TaoxEval {
  double im = 0.0, rate = 0.0;
  double dim_dv = 0.0, dim_dm = 0.0;
  double drate_dv = 0.0, drate_dm = 0.0;
};
TaoxEval taox_eval(double m, double vm, const TaoxParams& p);

// Coupled right-hand side of the second-order cell: the memristor sits in
// parallel with the cell capacitor, v_m = x. Returns (dx/dt, dm/dt).
std::pair<Grid, Grid> mcellnn_rhs(const Grid& x, const Grid& m, const Grid& u,
                                  const TemplateSet& ts,
                                  const ParamStore& store, const TaoxParams& p,
                                  const SolverConfig& cfg,
                                  Boundary b = Boundary::Zero);

// Forward-Euler co-integration of (x, m); m is clamped to [m_min, 1] after
// every step; returns y(x(T)).
Grid integrate_mlayer(const Grid& u, const TemplateSet& ts,
                      const ParamStore& store, const TaoxParams& p,
                      const SolverConfig& cfg, Boundary b = Boundary::Zero,
                      const StepObserver& observer = {});

NodeId record_integrate_mlayer(Tape& tape, NodeId u, const TemplateSet& ts,
                               const TaoxParams& p, const SolverConfig& cfg,
                               Boundary b = Boundary::Zero,
                               NodeId extra_bias = {});

template <class Ex>
typename Ex::V integrate_mcellnn(Ex& ex, const typename Ex::V& u,
                                 const TemplateSet& ts, const TaoxParams& p,
                                 const SolverConfig& cfg, Boundary b,
                                 typename Ex::V* extra_bias);

// Drives the isolated device with amplitude*sin(2*pi*frequency*t) and emits
// one row per Euler step. dt must resolve >= 100 samples per cycle.
struct SweepSample {
  double t, v, i, m;
};
std::vector<SweepSample> memristor_sweep(const TaoxParams& p, double amplitude,
                                         double frequency, int cycles,
                                         double dt);

}  // namespace celldiff
