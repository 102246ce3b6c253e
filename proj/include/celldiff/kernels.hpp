#pragma once

#include "celldiff/grid.hpp"

// Low-level neighborhood-sum kernels. Each kernel has an OpenMP-parallel
// implementation and a serial reference; both accumulate every output
// element in the same fixed order, so results are bit-identical regardless
// of thread count. The unsuffixed entry points dispatch between them.
//
// Weight layout: w[out_ch][in_ch][2S+1][2S+1], row-major. The sum is a
// cross-correlation: out[oc][r][c] = sum_{ic,kr,kc} w * in[ic][r+kr-S][c+kc-S],
// out-of-range input handled per Boundary.

namespace celldiff::kernels {

void conv2d(double* out, const double* in, const double* w, int out_ch,
            int in_ch, int h, int wd, int radius, Boundary b);
void conv2d_serial(double* out, const double* in, const double* w, int out_ch,
                   int in_ch, int h, int wd, int radius, Boundary b);
void conv2d_omp(double* out, const double* in, const double* w, int out_ch,
                int in_ch, int h, int wd, int radius, Boundary b);

// d(loss)/d(in) given d(loss)/d(out). Overwrites gin.
void conv2d_grad_input(double* gin, const double* gout, const double* w,
                       int out_ch, int in_ch, int h, int wd, int radius,
                       Boundary b);
void conv2d_grad_input_serial(double* gin, const double* gout, const double* w,
                              int out_ch, int in_ch, int h, int wd, int radius,
                              Boundary b);
void conv2d_grad_input_omp(double* gin, const double* gout, const double* w,
                           int out_ch, int in_ch, int h, int wd, int radius,
                           Boundary b);

// d(loss)/d(w) given d(loss)/d(out). Accumulates into gw.
void conv2d_grad_weights(double* gw, const double* gout, const double* in,
                         int out_ch, int in_ch, int h, int wd, int radius,
                         Boundary b);
void conv2d_grad_weights_serial(double* gw, const double* gout,
                                const double* in, int out_ch, int in_ch, int h,
                                int wd, int radius, Boundary b);
void conv2d_grad_weights_omp(double* gw, const double* gout, const double* in,
                             int out_ch, int in_ch, int h, int wd, int radius,
                             Boundary b);

// Pads one channel plane (h x wd) into dst ((h+2S) x (wd+2S)) per boundary.
void pad_plane(double* dst, const double* src, int h, int wd, int radius,
               Boundary b);

}  // namespace celldiff::kernels
