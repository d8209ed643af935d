#include "eqdet/conv.hpp"

#include <algorithm>

namespace eqdet {

namespace detail {

namespace {

// y range with 0 <= y*stride - pad + d < n, clipped to [0, m)
inline void sample_range(int n, int m, int stride, int pad, int d, int& lo, int& hi) {
    const int num_lo = pad - d;
    lo = num_lo <= 0 ? 0 : (num_lo + stride - 1) / stride;
    const int num_hi = n - 1 + pad - d;
    hi = num_hi < 0 ? -1 : std::min(m - 1, num_hi / stride);
}

}  // namespace

void conv_plane_accum(const double* in, int n, const double* ker, int ksz, int stride, int pad, double* out, int m) {
    for (int dy = 0; dy < ksz; ++dy) {
        int y0, y1;
        sample_range(n, m, stride, pad, dy, y0, y1);
        for (int dx = 0; dx < ksz; ++dx) {
            int x0, x1;
            sample_range(n, m, stride, pad, dx, x0, x1);
            const double kv = ker[dy * ksz + dx];
            for (int y = y0; y <= y1; ++y) {
                const double* in_row = in + static_cast<std::int64_t>(y * stride - pad + dy) * n - pad + dx;
                double* out_row = out + static_cast<std::int64_t>(y) * m;
                if (stride == 1) {
                    for (int x = x0; x <= x1; ++x) out_row[x] += kv * in_row[x];
                } else {
                    for (int x = x0; x <= x1; ++x) out_row[x] += kv * in_row[x * stride];
                }
            }
        }
    }
}

void conv_plane_scatter(const double* in, int m, const double* ker, int ksz, int stride, int pad, double* out, int n) {
    for (int dy = 0; dy < ksz; ++dy) {
        int y0, y1;
        sample_range(n, m, stride, pad, dy, y0, y1);
        for (int dx = 0; dx < ksz; ++dx) {
            int x0, x1;
            sample_range(n, m, stride, pad, dx, x0, x1);
            const double kv = ker[dy * ksz + dx];
            for (int y = y0; y <= y1; ++y) {
                const double* in_row = in + static_cast<std::int64_t>(y) * m;
                double* out_row = out + static_cast<std::int64_t>(y * stride - pad + dy) * n - pad + dx;
                if (stride == 1) {
                    for (int x = x0; x <= x1; ++x) out_row[x] += kv * in_row[x];
                } else {
                    for (int x = x0; x <= x1; ++x) out_row[x * stride] += kv * in_row[x];
                }
            }
        }
    }
}

void conv_plane_kernel_grad(const double* in, int n, const double* gout, int m, int ksz, int stride, int pad,
                            double* gk) {
    for (int dy = 0; dy < ksz; ++dy) {
        int y0, y1;
        sample_range(n, m, stride, pad, dy, y0, y1);
        for (int dx = 0; dx < ksz; ++dx) {
            int x0, x1;
            sample_range(n, m, stride, pad, dx, x0, x1);
            double acc = 0.0;
            for (int y = y0; y <= y1; ++y) {
                const double* in_row = in + static_cast<std::int64_t>(y * stride - pad + dy) * n - pad + dx;
                const double* g_row = gout + static_cast<std::int64_t>(y) * m;
                if (stride == 1) {
                    for (int x = x0; x <= x1; ++x) acc += g_row[x] * in_row[x];
                } else {
                    for (int x = x0; x <= x1; ++x) acc += g_row[x] * in_row[x * stride];
                }
            }
            gk[dy * ksz + dx] += acc;
        }
    }
}

}  // namespace detail

namespace {

void check_conv_args(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec, bool transposed) {
    spec.validate();
    if (spec.transposed != transposed)
        throw std::invalid_argument("conv: spec.transposed does not match the operation");
    if (input.rank() != 4) throw std::invalid_argument("conv: input must be [B,C,Y,X]");
    if (kernel.rank() != 4) throw std::invalid_argument("conv: kernel must be rank 4");
    const int k = spec.kernel_size;
    if (kernel.dim(2) != k || kernel.dim(3) != k) throw std::invalid_argument("conv: kernel extent mismatch");
    if (input.dim(2) != input.dim(3)) throw std::invalid_argument("conv: spatial extent must be square");
    if (kernel.dim(0) != spec.out_channels || kernel.dim(1) != spec.in_channels)
        throw std::invalid_argument("conv: kernel channel axes do not match spec");
    if (input.dim(1) != (transposed ? spec.out_channels : spec.in_channels))
        throw std::invalid_argument("conv: input channel count mismatch");
}

}  // namespace

GridTensor conv2d(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec) {
    check_conv_args(input, kernel, spec, false);
    const int b_n = input.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int n = input.dim(2), k = spec.kernel_size;
    const int m = spec.output_extent(n);

    GridTensor out({b_n, cout, m, m});
    const std::int64_t in_plane = static_cast<std::int64_t>(n) * n;
    const std::int64_t out_plane = static_cast<std::int64_t>(m) * m;
    const std::int64_t ker_plane = static_cast<std::int64_t>(k) * k;

    for (int b = 0; b < b_n; ++b)
        for (int co = 0; co < cout; ++co) {
            double* op = out.data() + (static_cast<std::int64_t>(b) * cout + co) * out_plane;
            for (int ci = 0; ci < cin; ++ci) {
                const double* ip = input.data() + (static_cast<std::int64_t>(b) * cin + ci) * in_plane;
                const double* kp = kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * ker_plane;
                detail::conv_plane_accum(ip, n, kp, k, spec.stride, spec.padding, op, m);
            }
        }
    return out;
}

GridTensor conv2d_transpose(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec) {
    check_conv_args(input, kernel, spec, true);
    const int b_n = input.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int m = input.dim(2), k = spec.kernel_size;
    const int n = spec.output_extent(m);

    GridTensor out({b_n, cin, n, n});
    const std::int64_t in_plane = static_cast<std::int64_t>(m) * m;
    const std::int64_t out_plane = static_cast<std::int64_t>(n) * n;
    const std::int64_t ker_plane = static_cast<std::int64_t>(k) * k;

    for (int b = 0; b < b_n; ++b)
        for (int ci = 0; ci < cin; ++ci) {
            double* op = out.data() + (static_cast<std::int64_t>(b) * cin + ci) * out_plane;
            for (int co = 0; co < cout; ++co) {
                const double* ip = input.data() + (static_cast<std::int64_t>(b) * cout + co) * in_plane;
                const double* kp = kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * ker_plane;
                detail::conv_plane_scatter(ip, m, kp, k, spec.stride, spec.padding, op, n);
            }
        }
    return out;
}

ConvGrads conv2d_backward(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec,
                          const GridTensor& grad_out) {
    check_conv_args(input, kernel, spec, false);
    const int b_n = input.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int n = input.dim(2), k = spec.kernel_size;
    const int m = spec.output_extent(n);
    if (grad_out.dim(0) != b_n || grad_out.dim(1) != cout || grad_out.dim(2) != m || grad_out.dim(3) != m)
        throw std::invalid_argument("conv2d_backward: grad_out shape mismatch");

    ConvGrads g{GridTensor(input.shape()), GridTensor(kernel.shape())};
    const std::int64_t in_plane = static_cast<std::int64_t>(n) * n;
    const std::int64_t out_plane = static_cast<std::int64_t>(m) * m;
    const std::int64_t ker_plane = static_cast<std::int64_t>(k) * k;

    for (int b = 0; b < b_n; ++b) {
        for (int ci = 0; ci < cin; ++ci) {
            double* gxp = g.input.data() + (static_cast<std::int64_t>(b) * cin + ci) * in_plane;
            for (int co = 0; co < cout; ++co) {
                const double* gop = grad_out.data() + (static_cast<std::int64_t>(b) * cout + co) * out_plane;
                const double* kp = kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * ker_plane;
                detail::conv_plane_scatter(gop, m, kp, k, spec.stride, spec.padding, gxp, n);
            }
        }
        for (int co = 0; co < cout; ++co) {
            const double* gop = grad_out.data() + (static_cast<std::int64_t>(b) * cout + co) * out_plane;
            for (int ci = 0; ci < cin; ++ci) {
                const double* ip = input.data() + (static_cast<std::int64_t>(b) * cin + ci) * in_plane;
                double* gkp = g.kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * ker_plane;
                detail::conv_plane_kernel_grad(ip, n, gop, m, k, spec.stride, spec.padding, gkp);
            }
        }
    }
    return g;
}

ConvGrads conv2d_transpose_backward(const GridTensor& input, const GridTensor& kernel, const ConvSpec& spec,
                                    const GridTensor& grad_out) {
    check_conv_args(input, kernel, spec, true);
    const int b_n = input.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int m = input.dim(2), k = spec.kernel_size;
    const int n = spec.output_extent(m);
    if (grad_out.dim(0) != b_n || grad_out.dim(1) != cin || grad_out.dim(2) != n || grad_out.dim(3) != n)
        throw std::invalid_argument("conv2d_transpose_backward: grad_out shape mismatch");

    ConvGrads g{GridTensor(input.shape()), GridTensor(kernel.shape())};
    const std::int64_t in_plane = static_cast<std::int64_t>(m) * m;
    const std::int64_t out_plane = static_cast<std::int64_t>(n) * n;
    const std::int64_t ker_plane = static_cast<std::int64_t>(k) * k;

    for (int b = 0; b < b_n; ++b) {
        for (int co = 0; co < cout; ++co) {
            double* gxp = g.input.data() + (static_cast<std::int64_t>(b) * cout + co) * in_plane;
            for (int ci = 0; ci < cin; ++ci) {
                const double* gop = grad_out.data() + (static_cast<std::int64_t>(b) * cin + ci) * out_plane;
                const double* kp = kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * ker_plane;
                detail::conv_plane_accum(gop, n, kp, k, spec.stride, spec.padding, gxp, m);
            }
        }
        for (int co = 0; co < cout; ++co) {
            const double* ip = input.data() + (static_cast<std::int64_t>(b) * cout + co) * in_plane;
            for (int ci = 0; ci < cin; ++ci) {
                const double* gop = grad_out.data() + (static_cast<std::int64_t>(b) * cin + ci) * out_plane;
                double* gkp = g.kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * ker_plane;
                detail::conv_plane_kernel_grad(gop, n, ip, m, k, spec.stride, spec.padding, gkp);
            }
        }
    }
    return g;
}

GridTensor linear(const GridTensor& input, const GridTensor& weight, const GridTensor& bias) {
    if (weight.rank() != 2) throw std::invalid_argument("linear: weight must be [Dout,Din]");
    const int dout = weight.dim(0), din = weight.dim(1);
    if (input.dim(input.rank() - 1) != din) throw std::invalid_argument("linear: last-axis length mismatch");
    if (bias.rank() != 1 || bias.dim(0) != dout) throw std::invalid_argument("linear: bias length mismatch");

    std::vector<int> out_shape = input.shape();
    out_shape.back() = dout;
    GridTensor out(out_shape);

    const std::int64_t rows = input.numel() / din;
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in_row = input.data() + r * din;
        double* out_row = out.data() + r * dout;
        for (int o = 0; o < dout; ++o) {
            const double* w_row = weight.data() + static_cast<std::int64_t>(o) * din;
            double acc = bias.data()[o];
            for (int i = 0; i < din; ++i) acc += w_row[i] * in_row[i];
            out_row[o] = acc;
        }
    }
    return out;
}

LinearGrads linear_backward(const GridTensor& input, const GridTensor& weight, const GridTensor& grad_out) {
    const int dout = weight.dim(0), din = weight.dim(1);
    LinearGrads g{GridTensor(input.shape()), GridTensor(weight.shape()), GridTensor({dout})};

    const std::int64_t rows = input.numel() / din;
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in_row = input.data() + r * din;
        const double* go_row = grad_out.data() + r * dout;
        double* gi_row = g.input.data() + r * din;
        for (int o = 0; o < dout; ++o) {
            const double go = go_row[o];
            const double* w_row = weight.data() + static_cast<std::int64_t>(o) * din;
            double* gw_row = g.weight.data() + static_cast<std::int64_t>(o) * din;
            for (int i = 0; i < din; ++i) {
                gi_row[i] += go * w_row[i];
                gw_row[i] += go * in_row[i];
            }
            g.bias.data()[o] += go;
        }
    }
    return g;
}

}  // namespace eqdet
