#pragma once

#include <vector>

#include "celldiff/exec.hpp"
#include "celldiff/grid.hpp"
#include "celldiff/nonlin.hpp"
#include "celldiff/tape.hpp"

namespace celldiff {

struct Rng;

// Cell output nonlinearities, elementwise.
double output_nonlinearity(double x);
Grid output_nonlinearity(const Grid& g);
double leaky_nonlinearity(double x, double alpha);
Grid leaky_nonlinearity(const Grid& g, double alpha);

struct SolverConfig {
  double dt = 0.01;
  int steps = 100;
  Nonlin nonlinearity = Nonlin::Leaky;
  double alpha = 0.01;
  enum class Init { Zero, CopyInput } initial_state = Init::Zero;
  void validate() const;
};

// The three coupling templates of one layer, registered as trainable
// parameters: feedback applies to neighbor outputs, control to the held
// input, bias per state channel.
struct TemplateSet {
  ParamId feedback = -1;  // (state_ch, state_ch, k, k)
  ParamId control = -1;   // (state_ch, in_ch, k, k)
  ParamId bias = -1;      // (state_ch)
  int radius = 1;
  int state_channels = 0;
  int input_channels = 0;

  static TemplateSet create(ParamStore& store, const std::string& prefix,
                            int state_ch, int in_ch, int radius = 1);
  // Contractive start: feedback ~ U(-0.1/fan, 0.1/fan); control and bias
  // small-uniform.
  void randomize(ParamStore& store, Rng& rng) const;
};

// Raw single-kernel view used by the standalone grid-level API.
struct Kernel {
  int out_ch = 0;
  int in_ch = 0;
  int radius = 1;
  std::vector<double> w;  // (out_ch, in_ch, 2r+1, 2r+1)
};

// Template-weighted sum over the S-neighborhood of every cell.
Grid neighborhood_weighted_sum(const Grid& g, const Kernel& k, Boundary b);

// Right-hand side of the state equation:
// dx/dt = -x + feedback (*) y(x) + control (*) u + bias.
Grid cellnn_rhs(const Grid& x, const Grid& u, const TemplateSet& ts,
                const ParamStore& store, const SolverConfig& cfg,
                Boundary b = Boundary::Zero);

// Forward-Euler integration over cfg.steps; returns y(x(T)).
Grid integrate_layer(const Grid& u, const TemplateSet& ts,
                     const ParamStore& store, const SolverConfig& cfg,
                     Boundary b = Boundary::Zero,
                     const StepObserver& observer = {});

// Recorded (differentiable) variant; extra_bias, when valid, is a per-state-
// channel vector node added to the bias term.
NodeId record_integrate_layer(Tape& tape, NodeId u, const TemplateSet& ts,
                              const SolverConfig& cfg,
                              Boundary b = Boundary::Zero,
                              NodeId extra_bias = {});

// The fixed point of the state equation with zero feedback, passed through
// the output nonlinearity: y(control (*) u + bias).
Grid conv_equivalent(const Grid& u, const Kernel& control,
                     const std::vector<double>& bias,
                     Nonlin kind = Nonlin::Saturating, double alpha = 0.01);

// Integrates the heat-mimicking template (center 1-4*lambda, edge-neighbor
// lambda) under zero-flux boundary; returns the state at every step,
// trajectory[0] == x0. Requires |x0| <= 1 and lambda*dt <= 1/8.
std::vector<Grid> heat_diffusion_demo(const Grid& x0, double lambda, int steps,
                                      double dt);

// Shared composition used by both executors; defined in cellnn.cpp for the
// two instantiations.
template <class Ex>
typename Ex::V integrate_cellnn(Ex& ex, const typename Ex::V& u,
                                const TemplateSet& ts, const SolverConfig& cfg,
                                Boundary b, typename Ex::V* extra_bias);

NodeId record_euler_step(Tape& tape, NodeId x, NodeId ay, NodeId k, double dt);

}  // namespace celldiff
