#pragma once

#include "eqdet/tensor.hpp"

namespace eqdet {

/// Planar convolution, zero padding.
///   input  [B, Cin, Y, X]
///   kernel [Cout, Cin, K, K]
///   out    [B, Cout, Y', X'],  out[b,co,y,x] = sum_{ci,dy,dx} in[b,ci,y*s-p+dy,x*s-p+dx] * k[co,ci,dy,dx]
GridTensor conv2d(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec);

/// Adjoint of conv2d with the same kernel layout:
///   input  [B, Cout, Y', X']   (lives in conv2d output space)
///   kernel [Cout, Cin, K, K]
///   out    [B, Cin, Y, X]
/// For all a, b: <conv2d(a,k), b> == <a, conv2d_transpose(b,k)>.
GridTensor conv2d_transpose(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec);

struct ConvGrads {
    GridTensor input;
    GridTensor kernel;
};

ConvGrads conv2d_backward(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec,
                          const GridTensor& grad_out);

ConvGrads conv2d_transpose_backward(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec,
                                    const GridTensor& grad_out);

/// Affine map on the last axis: out[..,o] = sum_i in[..,i]*weight[o,i] + bias[o].
/// weight is [Dout, Din], bias is [Dout].
GridTensor linear(const GridTensor& input, const GridTensor& weight, const GridTensor& bias);

struct LinearGrads {
    GridTensor input;
    GridTensor weight;
    GridTensor bias;
};

LinearGrads linear_backward(const GridTensor& input, const GridTensor& weight, const GridTensor& grad_out);

namespace detail {
// Plane-level primitives shared by the planar and group convolutions.
// All accumulate into `out`, reading contributions in a fixed (dy,dx,y,x)
// order so results are bit-reproducible.
void conv_plane_accum(const double* in, int n, const double* ker, int ksz, int stride, int pad, double* out, int m);
void conv_plane_scatter(const double* in, int m, const double* ker, int ksz, int stride, int pad, double* out, int n);
void conv_plane_kernel_grad(const double* in, int n, const double* gout, int m, int ksz, int stride, int pad,
                            double* gk);
}  // namespace detail

}  // namespace eqdet
