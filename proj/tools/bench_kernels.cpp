// Benchmark comparing the serial reference kernels against the OpenMP
// variants, and a parity check that both produce bit-identical output.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include <omp.h>

#include "celldiff/kernels.hpp"

using namespace celldiff;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) {
  return std::chrono::duration<double>(clk::now() - t0).count();
}

struct Case {
  const char* name;
  int oc, ic, h, w, radius;
  int reps;
};

void run_case(const Case& cs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const int k = 2 * cs.radius + 1;
  std::vector<double> in(static_cast<std::size_t>(cs.ic) * cs.h * cs.w);
  std::vector<double> w(static_cast<std::size_t>(cs.oc) * cs.ic * k * k);
  std::vector<double> out_s(static_cast<std::size_t>(cs.oc) * cs.h * cs.w);
  std::vector<double> out_p(out_s.size());
  for (auto& v : in) v = dist(rng);
  for (auto& v : w) v = dist(rng);

  const double flops_per_call =
      2.0 * cs.oc * cs.ic * k * k * cs.h * cs.w;

  kernels::conv2d_serial(out_s.data(), in.data(), w.data(), cs.oc, cs.ic, cs.h,
                         cs.w, cs.radius, Boundary::Zero);
  kernels::conv2d_omp(out_p.data(), in.data(), w.data(), cs.oc, cs.ic, cs.h,
                      cs.w, cs.radius, Boundary::Zero);
  bool identical = out_s == out_p;

  auto t0 = clk::now();
  for (int i = 0; i < cs.reps; ++i)
    kernels::conv2d_serial(out_s.data(), in.data(), w.data(), cs.oc, cs.ic,
                           cs.h, cs.w, cs.radius, Boundary::Zero);
  const double ts = seconds_since(t0);

  t0 = clk::now();
  for (int i = 0; i < cs.reps; ++i)
    kernels::conv2d_omp(out_p.data(), in.data(), w.data(), cs.oc, cs.ic, cs.h,
                        cs.w, cs.radius, Boundary::Zero);
  const double tp = seconds_since(t0);

  std::printf(
      "%-28s serial %8.2f us/call %6.2f GFLOP/s | omp %8.2f us/call %6.2f "
      "GFLOP/s | speedup %.2fx | bit-identical: %s\n",
      cs.name, 1e6 * ts / cs.reps, flops_per_call * cs.reps / ts * 1e-9,
      1e6 * tp / cs.reps, flops_per_call * cs.reps / tp * 1e-9, ts / tp,
      identical ? "yes" : "NO");

  // backward kernels, serial timing only (they share the dispatch policy)
  std::vector<double> gout(out_s.size());
  for (auto& v : gout) v = dist(rng);
  std::vector<double> gin(in.size());
  std::vector<double> gw(w.size(), 0.0);
  t0 = clk::now();
  for (int i = 0; i < cs.reps; ++i)
    kernels::conv2d_grad_input_serial(gin.data(), gout.data(), w.data(), cs.oc,
                                      cs.ic, cs.h, cs.w, cs.radius,
                                      Boundary::Zero);
  const double tgi = seconds_since(t0);
  t0 = clk::now();
  for (int i = 0; i < cs.reps; ++i)
    kernels::conv2d_grad_weights_serial(gw.data(), gout.data(), in.data(),
                                        cs.oc, cs.ic, cs.h, cs.w, cs.radius,
                                        Boundary::Zero);
  const double tgw = seconds_since(t0);
  std::printf("%-28s grad_input %8.2f us/call | grad_weights %8.2f us/call\n",
              "", 1e6 * tgi / cs.reps, 1e6 * tgw / cs.reps);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  std::mt19937_64 rng(7);
  Case cases[] = {
      {"denoiser stage 32ch 8x8", 32, 32, 8, 8, 1, 2000},
      {"denoiser stage 64ch 4x4", 64, 64, 4, 4, 1, 2000},
      {"wide stage 64ch 8x8", 64, 64, 8, 8, 1, 1000},
      {"large grid 8ch 128x128", 8, 8, 128, 128, 1, 50},
      {"large grid 16ch 256x256", 16, 16, 256, 256, 1, 5},
  };
  for (const auto& cs : cases) run_case(cs, rng);
  return 0;
}
