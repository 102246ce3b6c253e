#include "celldiff/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include <omp.h>

namespace celldiff::kernels {

namespace {

inline int clampi(int v, int lo, int hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

std::vector<double>& scratch(int which) {
  thread_local std::vector<double> buf[3];
  return buf[which];
}

// Pads all ch planes into one contiguous buffer.
void pad_all(double* dst, const double* src, int ch, int h, int wd, int radius,
             Boundary b) {
  const int ph = h + 2 * radius, pw = wd + 2 * radius;
  for (int c = 0; c < ch; ++c)
    pad_plane(dst + static_cast<std::size_t>(c) * ph * pw,
              src + static_cast<std::size_t>(c) * h * wd, h, wd, radius, b);
}

// Transposed, spatially flipped weight view: wt[(i*nout+o)*kk + t] =
// w[(o*nin+i)*kk + (kk-1-t)]. Used to express grad-input as a correlation.
void flip_transpose_weights(double* wt, const double* w, int nout, int nin,
                            int kk) {
  for (int o = 0; o < nout; ++o)
    for (int i = 0; i < nin; ++i) {
      const double* src = w + (static_cast<std::size_t>(o) * nin + i) * kk;
      double* dst = wt + (static_cast<std::size_t>(i) * nout + o) * kk;
      for (int t = 0; t < kk; ++t) dst[t] = src[kk - 1 - t];
    }
}

// ---------------------------------------------------------------------------
// Small-grid strategy: the k*k shifted views of each padded plane are laid
// out contiguously ("patches"), so every kernel is a flat loop over
// len = h*wd regardless of the grid shape. Used when len <= kIm2colMaxLen.
// ---------------------------------------------------------------------------
constexpr std::size_t kIm2colMaxLen = 4096;

// patches[(i*kk + (kr*k+kc))*len + (r*wd+c)] = pad[i][r+kr][c+kc]
void build_patches(double* dst, const double* pad, int ch, int h, int wd,
                   int k) {
  const int pw = wd + k - 1;
  const std::size_t len = static_cast<std::size_t>(h) * wd;
  for (int ic = 0; ic < ch; ++ic) {
    const double* plane = pad + static_cast<std::size_t>(ic) * (h + k - 1) * pw;
    double* base = dst + static_cast<std::size_t>(ic) * k * k * len;
    for (int kr = 0; kr < k; ++kr)
      for (int kc = 0; kc < k; ++kc) {
        double* prow = base + static_cast<std::size_t>(kr * k + kc) * len;
        for (int r = 0; r < h; ++r)
          std::memcpy(prow + static_cast<std::size_t>(r) * wd,
                      plane + static_cast<std::size_t>(r + kr) * pw + kc,
                      sizeof(double) * wd);
      }
  }
}

// out[o][f] = sum_{i,t} w[(o*nin+i)*kk + t] * patches[(i*kk+t)*len + f].
// Accumulation order per output element is (i, t); identical in the serial
// and parallel variants, so results are bit-identical for any thread count.
// TILE is a compile-time tile length dividing len (0 = generic tail case).
template <int TILE>
void corr_flat_one(double* __restrict__ out, const double* __restrict__ patches,
                   const double* __restrict__ w, int o, int nin, int kk,
                   std::size_t len) {
  double* op = out + static_cast<std::size_t>(o) * len;
  const double* wb = w + static_cast<std::size_t>(o) * nin * kk;
  constexpr std::size_t step = TILE > 0 ? TILE : 64;
  constexpr int cap = TILE > 0 ? TILE : 64;
  for (std::size_t f0 = 0; f0 < len; f0 += step) {
    const int n =
        TILE > 0 ? TILE : static_cast<int>(std::min<std::size_t>(64, len - f0));
    double acc[cap] = {0.0};
    const double* pcol = patches + f0;
    for (int it = 0; it < nin * kk; ++it) {
      const double cw = wb[it];
      const double* p = pcol + static_cast<std::size_t>(it) * len;
      for (int f = 0; f < n; ++f) acc[f] += cw * p[f];
    }
    for (int f = 0; f < n; ++f) op[f0 + f] = acc[f];
  }
}

using CorrOneFn = void (*)(double*, const double*, const double*, int, int,
                           int, std::size_t);

CorrOneFn corr_one_for_len(std::size_t len) {
  if (len % 64 == 0) return corr_flat_one<64>;
  if (len % 32 == 0) return corr_flat_one<32>;
  if (len % 16 == 0) return corr_flat_one<16>;
  if (len % 8 == 0) return corr_flat_one<8>;
  if (len % 4 == 0) return corr_flat_one<4>;
  return corr_flat_one<0>;
}

void corr_flat(double* out, const double* patches, const double* w, int nout,
               int nin, int kk, std::size_t len, bool parallel) {
  const CorrOneFn fn = corr_one_for_len(len);
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (int o = 0; o < nout; ++o) fn(out, patches, w, o, nin, kk, len);
  } else {
    for (int o = 0; o < nout; ++o) fn(out, patches, w, o, nin, kk, len);
  }
}

// Eight-lane dot product with a fixed combination order. The lane partials
// make the loop vectorizable without reassociation; the order is part of the
// kernel contract (identical everywhere it is used). LEN > 0 pins the trip
// count at compile time; LEN == 0 is the runtime-length variant.
template <int LEN>
double dot_lanes(const double* __restrict__ x, const double* __restrict__ y,
                 std::size_t len) {
  const std::size_t n = LEN > 0 ? LEN : len;
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0;
  std::size_t f = 0;
  for (; f + 8 <= n; f += 8) {
    a0 += x[f + 0] * y[f + 0];
    a1 += x[f + 1] * y[f + 1];
    a2 += x[f + 2] * y[f + 2];
    a3 += x[f + 3] * y[f + 3];
    a4 += x[f + 4] * y[f + 4];
    a5 += x[f + 5] * y[f + 5];
    a6 += x[f + 6] * y[f + 6];
    a7 += x[f + 7] * y[f + 7];
  }
  double tail = 0;
  if constexpr (LEN % 8 != 0) {
    for (; f < n; ++f) tail += x[f] * y[f];
  }
  return ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7)) + tail;
}

// gw[(o*nin+i)*kk + t] += dot(gout[o], patches[i][t])
template <int LEN>
void gw_flat_ic(double* gw, const double* gout, const double* patches, int i,
                int nout, int nin, int kk, std::size_t len) {
  const double* pb = patches + static_cast<std::size_t>(i) * kk * len;
  for (int o = 0; o < nout; ++o) {
    const double* gp = gout + static_cast<std::size_t>(o) * len;
    double* wrow = gw + (static_cast<std::size_t>(o) * nin + i) * kk;
    for (int t = 0; t < kk; ++t)
      wrow[t] += dot_lanes<LEN>(gp, pb + static_cast<std::size_t>(t) * len, len);
  }
}

using GwIcFn = void (*)(double*, const double*, const double*, int, int, int,
                        int, std::size_t);

GwIcFn gw_ic_for_len(std::size_t len) {
  switch (len) {
    case 4: return gw_flat_ic<4>;
    case 16: return gw_flat_ic<16>;
    case 49: return gw_flat_ic<49>;
    case 64: return gw_flat_ic<64>;
    case 196: return gw_flat_ic<196>;
    case 256: return gw_flat_ic<256>;
    case 784: return gw_flat_ic<784>;
    case 1024: return gw_flat_ic<1024>;
    default: return gw_flat_ic<0>;
  }
}

// ---------------------------------------------------------------------------
// Large-grid strategy: walk the padded rows directly instead of materializing
// patches (which would spill the cache). Same (i, t) accumulation order per
// output element as the flat path.
// ---------------------------------------------------------------------------
constexpr int kRowTile = 16;

void row_corr_one(double* __restrict__ out, const double* __restrict__ pad,
                  const double* __restrict__ w, int o, int nin, int h, int wd,
                  int k) {
  const int ph = h + k - 1, pw = wd + k - 1;
  double* outp = out + static_cast<std::size_t>(o) * h * wd;
  const double* wbase = w + static_cast<std::size_t>(o) * nin * k * k;
  for (int r = 0; r < h; ++r) {
    for (int c0 = 0; c0 < wd; c0 += kRowTile) {
      const int n = std::min(kRowTile, wd - c0);
      double acc[kRowTile] = {0.0};
      for (int ic = 0; ic < nin; ++ic) {
        const double* plane = pad + static_cast<std::size_t>(ic) * ph * pw;
        const double* wrow = wbase + static_cast<std::size_t>(ic) * k * k;
        for (int kr = 0; kr < k; ++kr) {
          const double* prow = plane + static_cast<std::size_t>(r + kr) * pw + c0;
          for (int kc = 0; kc < k; ++kc) {
            const double cw = wrow[kr * k + kc];
            const double* p = prow + kc;
            for (int c = 0; c < n; ++c) acc[c] += cw * p[c];
          }
        }
      }
      double* orow = outp + static_cast<std::size_t>(r) * wd + c0;
      for (int c = 0; c < n; ++c) orow[c] = acc[c];
    }
  }
}

void row_corr(double* out, const double* pad, const double* w, int nout,
              int nin, int h, int wd, int k, bool parallel) {
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (int o = 0; o < nout; ++o) row_corr_one(out, pad, w, o, nin, h, wd, k);
  } else {
    for (int o = 0; o < nout; ++o) row_corr_one(out, pad, w, o, nin, h, wd, k);
  }
}

// Per-(o,i) weight gradients off the padded rows; per weight the accumulation
// order is a fixed row-major sweep with per-row lane partials.
void row_gw_pair(double* gw, const double* gout, const double* pad, int o,
                 int i, int nin, int h, int wd, int k) {
  const int pw = wd + k - 1;
  const double* plane = pad + static_cast<std::size_t>(i) * (h + k - 1) * pw;
  const double* gp = gout + static_cast<std::size_t>(o) * h * wd;
  double* wrow = gw + (static_cast<std::size_t>(o) * nin + i) * k * k;
  thread_local std::vector<double> acc;
  acc.assign(static_cast<std::size_t>(k) * k, 0.0);
  for (int r = 0; r < h; ++r) {
    const double* grow = gp + static_cast<std::size_t>(r) * wd;
    for (int kr = 0; kr < k; ++kr) {
      const double* prow = plane + static_cast<std::size_t>(r + kr) * pw;
      for (int kc = 0; kc < k; ++kc)
        acc[kr * k + kc] += dot_lanes<0>(grow, prow + kc, wd);
    }
  }
  for (int t = 0; t < k * k; ++t) wrow[t] += acc[t];
}

void row_gw(double* gw, const double* gout, const double* pad, int nout,
            int nin, int h, int wd, int k, bool parallel) {
  if (parallel) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int o = 0; o < nout; ++o)
      for (int i = 0; i < nin; ++i)
        row_gw_pair(gw, gout, pad, o, i, nin, h, wd, k);
  } else {
    for (int o = 0; o < nout; ++o)
      for (int i = 0; i < nin; ++i)
        row_gw_pair(gw, gout, pad, o, i, nin, h, wd, k);
  }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

// Folds grad wrt a padded plane back onto the source plane. For Zero this is
// a crop; for Replicate the border bands collapse onto the edge cells.
void fold_gpad(double* gin, const double* gpad, int ic, int h, int wd,
               int radius, Boundary b) {
  const int ph = h + 2 * radius, pw = wd + 2 * radius;
  const double* gp = gpad + static_cast<std::size_t>(ic) * ph * pw;
  double* gi = gin + static_cast<std::size_t>(ic) * h * wd;
  if (b == Boundary::Zero) {
    for (int r = 0; r < h; ++r)
      std::memcpy(gi + static_cast<std::size_t>(r) * wd,
                  gp + (static_cast<std::size_t>(r) + radius) * pw + radius,
                  sizeof(double) * wd);
    return;
  }
  for (int r = 0; r < h; ++r) {
    const int plo = (r == 0) ? 0 : r + radius;
    const int phi = (r == h - 1) ? h - 1 + 2 * radius : r + radius;
    for (int c = 0; c < wd; ++c) {
      const int qlo = (c == 0) ? 0 : c + radius;
      const int qhi = (c == wd - 1) ? wd - 1 + 2 * radius : c + radius;
      double acc = 0.0;
      for (int p = plo; p <= phi; ++p)
        for (int q = qlo; q <= qhi; ++q)
          acc += gp[static_cast<std::size_t>(p) * pw + q];
      gi[static_cast<std::size_t>(r) * wd + c] = acc;
    }
  }
}

bool use_parallel(std::size_t work) {
  return work >= 1u << 18 && !omp_in_parallel() && omp_get_max_threads() > 1;
}

// Correlation of `in` (padded per boundary b) with weights w over an h x wd
// domain; the workhorse behind both the forward pass and grad-input.
void padded_corr(double* out, const double* in, const double* w, int nout,
                 int nin, int h, int wd, int radius, Boundary b,
                 bool parallel) {
  const int k = 2 * radius + 1, kk = k * k;
  const int ph = h + 2 * radius, pw = wd + 2 * radius;
  const std::size_t len = static_cast<std::size_t>(h) * wd;
  auto& pad = scratch(0);
  pad.resize(static_cast<std::size_t>(nin) * ph * pw);
  pad_all(pad.data(), in, nin, h, wd, radius, b);
  if (len <= kIm2colMaxLen) {
    auto& patches = scratch(1);
    patches.resize(static_cast<std::size_t>(nin) * kk * len);
    build_patches(patches.data(), pad.data(), nin, h, wd, k);
    corr_flat(out, patches.data(), w, nout, nin, kk, len, parallel);
  } else {
    row_corr(out, pad.data(), w, nout, nin, h, wd, k, parallel);
  }
}

void conv_impl(double* out, const double* in, const double* w, int out_ch,
               int in_ch, int h, int wd, int radius, Boundary b,
               bool parallel) {
  padded_corr(out, in, w, out_ch, in_ch, h, wd, radius, b, parallel);
}

void grad_input_impl(double* gin, const double* gout, const double* w,
                     int out_ch, int in_ch, int h, int wd, int radius,
                     Boundary b, bool parallel) {
  const int k = 2 * radius + 1, kk = k * k;
  auto& wt = scratch(2);
  wt.resize(static_cast<std::size_t>(out_ch) * in_ch * kk);
  flip_transpose_weights(wt.data(), w, out_ch, in_ch, kk);
  if (b == Boundary::Zero) {
    // gin = correlation of gout (zero-padded by S) with the flipped kernels
    padded_corr(gin, gout, wt.data(), in_ch, out_ch, h, wd, radius,
                Boundary::Zero, parallel);
    return;
  }
  // Replicate: compute grad wrt the padded plane on the (h+2S, wd+2S)
  // domain, then fold the border bands back onto the edge cells. The padded
  // domain needs gout zero-padded by 2S, expressed below as a correlation
  // over a (h+2S, wd+2S) grid with an extra S of zero padding.
  const int ph = h + 2 * radius, pw = wd + 2 * radius;
  const std::size_t len2 = static_cast<std::size_t>(ph) * pw;
  // Place gout in the center of a (ph, pw) zero canvas, then correlate that
  // canvas with the flipped weights under zero padding.
  std::vector<double> canvas(static_cast<std::size_t>(out_ch) * len2, 0.0);
  for (int oc = 0; oc < out_ch; ++oc)
    for (int r = 0; r < h; ++r)
      std::memcpy(canvas.data() + (static_cast<std::size_t>(oc) * ph + r + radius) * pw +
                      radius,
                  gout + (static_cast<std::size_t>(oc) * h + r) * wd,
                  sizeof(double) * wd);
  std::vector<double> gpad(static_cast<std::size_t>(in_ch) * len2);
  padded_corr(gpad.data(), canvas.data(), wt.data(), in_ch, out_ch, ph, pw,
              radius, Boundary::Zero, parallel);
  for (int ic = 0; ic < in_ch; ++ic)
    fold_gpad(gin, gpad.data(), ic, h, wd, radius, b);
}

void grad_weights_impl(double* gw, const double* gout, const double* in,
                       int out_ch, int in_ch, int h, int wd, int radius,
                       Boundary b, bool parallel) {
  const int k = 2 * radius + 1, kk = k * k;
  const int ph = h + 2 * radius, pw = wd + 2 * radius;
  const std::size_t len = static_cast<std::size_t>(h) * wd;
  auto& pad = scratch(0);
  pad.resize(static_cast<std::size_t>(in_ch) * ph * pw);
  pad_all(pad.data(), in, in_ch, h, wd, radius, b);
  if (len <= kIm2colMaxLen) {
    auto& patches = scratch(1);
    patches.resize(static_cast<std::size_t>(in_ch) * kk * len);
    build_patches(patches.data(), pad.data(), in_ch, h, wd, k);
    const GwIcFn fn = gw_ic_for_len(len);
    if (parallel) {
#pragma omp parallel for schedule(static)
      for (int ic = 0; ic < in_ch; ++ic)
        fn(gw, gout, patches.data(), ic, out_ch, in_ch, kk, len);
    } else {
      for (int ic = 0; ic < in_ch; ++ic)
        fn(gw, gout, patches.data(), ic, out_ch, in_ch, kk, len);
    }
  } else {
    row_gw(gw, gout, pad.data(), out_ch, in_ch, h, wd, k, parallel);
  }
}

}  // namespace

void pad_plane(double* dst, const double* src, int h, int wd, int radius,
               Boundary b) {
  const int pw = wd + 2 * radius;
  for (int pr = 0; pr < h + 2 * radius; ++pr) {
    double* drow = dst + static_cast<std::size_t>(pr) * pw;
    const int sr = pr - radius;
    if (b == Boundary::Zero && (sr < 0 || sr >= h)) {
      std::fill(drow, drow + pw, 0.0);
      continue;
    }
    const double* srow = src + static_cast<std::size_t>(clampi(sr, 0, h - 1)) * wd;
    if (b == Boundary::Zero) {
      std::fill(drow, drow + radius, 0.0);
      std::memcpy(drow + radius, srow, sizeof(double) * wd);
      std::fill(drow + radius + wd, drow + pw, 0.0);
    } else {
      std::fill(drow, drow + radius, srow[0]);
      std::memcpy(drow + radius, srow, sizeof(double) * wd);
      std::fill(drow + radius + wd, drow + pw, srow[wd - 1]);
    }
  }
}

void conv2d_serial(double* out, const double* in, const double* w, int out_ch,
                   int in_ch, int h, int wd, int radius, Boundary b) {
  conv_impl(out, in, w, out_ch, in_ch, h, wd, radius, b, false);
}

void conv2d_omp(double* out, const double* in, const double* w, int out_ch,
                int in_ch, int h, int wd, int radius, Boundary b) {
  conv_impl(out, in, w, out_ch, in_ch, h, wd, radius, b, true);
}

void conv2d(double* out, const double* in, const double* w, int out_ch,
            int in_ch, int h, int wd, int radius, Boundary b) {
  const std::size_t work = static_cast<std::size_t>(out_ch) * in_ch * h * wd;
  conv_impl(out, in, w, out_ch, in_ch, h, wd, radius, b, use_parallel(work));
}

void conv2d_grad_input_serial(double* gin, const double* gout, const double* w,
                              int out_ch, int in_ch, int h, int wd, int radius,
                              Boundary b) {
  grad_input_impl(gin, gout, w, out_ch, in_ch, h, wd, radius, b, false);
}

void conv2d_grad_input_omp(double* gin, const double* gout, const double* w,
                           int out_ch, int in_ch, int h, int wd, int radius,
                           Boundary b) {
  grad_input_impl(gin, gout, w, out_ch, in_ch, h, wd, radius, b, true);
}

void conv2d_grad_input(double* gin, const double* gout, const double* w,
                       int out_ch, int in_ch, int h, int wd, int radius,
                       Boundary b) {
  const std::size_t work = static_cast<std::size_t>(out_ch) * in_ch * h * wd;
  grad_input_impl(gin, gout, w, out_ch, in_ch, h, wd, radius, b,
                  use_parallel(work));
}

void conv2d_grad_weights_serial(double* gw, const double* gout,
                                const double* in, int out_ch, int in_ch, int h,
                                int wd, int radius, Boundary b) {
  grad_weights_impl(gw, gout, in, out_ch, in_ch, h, wd, radius, b, false);
}

void conv2d_grad_weights_omp(double* gw, const double* gout, const double* in,
                             int out_ch, int in_ch, int h, int wd, int radius,
                             Boundary b) {
  grad_weights_impl(gw, gout, in, out_ch, in_ch, h, wd, radius, b, true);
}

void conv2d_grad_weights(double* gw, const double* gout, const double* in,
                         int out_ch, int in_ch, int h, int wd, int radius,
                         Boundary b) {
  const std::size_t work = static_cast<std::size_t>(out_ch) * in_ch * h * wd;
  grad_weights_impl(gw, gout, in, out_ch, in_ch, h, wd, radius, b,
                    use_parallel(work));
}

}  // namespace celldiff::kernels
