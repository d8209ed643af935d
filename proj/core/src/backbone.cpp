#include "eqdet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eqdet {

namespace {

inline std::pair<int, int> act_idx(int r, int y, int x, int n) {
    for (int i = 0; i < (r & 3); ++i) {
        const int ny = n - 1 - x;
        x = y;
        y = ny;
    }
    return {y, x};
}

// out[act(r, p)] = in[p] on one k x k plane
void rot_plane(const double* in, double* out, int k, int r) {
    if ((r & 3) == 0) {
        std::copy(in, in + static_cast<std::size_t>(k) * k, out);
        return;
    }
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            const auto [oy, ox] = act_idx(r, y, x, k);
            out[oy * k + ox] = in[y * k + x];
        }
}

// gbase[p] += grot[act(r, p)]
void unrot_plane_acc(const double* grot, double* gbase, int k, int r) {
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            const auto [oy, ox] = act_idx(r, y, x, k);
            gbase[y * k + x] += grot[oy * k + ox];
        }
}

void check_group_conv_args(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec, bool transposed) {
    spec.validate();
    if (spec.transposed != transposed)
        throw std::invalid_argument("group_conv: spec.transposed does not match the operation");
    check_lifted(x);
    if (kernel.rank() != 5 || kernel.dim(2) != 4)
        throw std::invalid_argument("group_conv: kernel must be [C',C,4,K,K]");
    const int k = spec.kernel_size;
    if (kernel.dim(3) != k || kernel.dim(4) != k) throw std::invalid_argument("group_conv: kernel extent mismatch");
    if (kernel.dim(0) != spec.out_channels || kernel.dim(1) != spec.in_channels)
        throw std::invalid_argument("group_conv: kernel channel axes do not match spec");
    if (x.dim(1) != (transposed ? spec.out_channels : spec.in_channels))
        throw std::invalid_argument("group_conv: input channel count mismatch");
}

std::int64_t plane(int n) { return static_cast<std::int64_t>(n) * n; }

}  // namespace

void check_lifted(const GridTensor& x) {
    if (x.rank() != 5) throw std::invalid_argument("lifted feature must be [B,C,S,Y,X]");
    if (x.dim(2) != 4) throw std::invalid_argument("lifted feature group axis must have length 4");
    if (x.dim(3) != x.dim(4)) throw std::invalid_argument("lifted feature spatial extent must be square");
}

GridTensor lifting_conv(const GridTensor& x, const GridTensor& base_kernel, const ConvSpec& spec) {
    spec.validate();
    if (x.rank() != 4) throw std::invalid_argument("lifting_conv: input must be [B,C,Y,X]");
    if (x.dim(2) != x.dim(3)) throw std::invalid_argument("lifting_conv: spatial extent must be square");
    if (base_kernel.rank() != 4 || base_kernel.dim(0) != spec.out_channels || base_kernel.dim(1) != spec.in_channels ||
        base_kernel.dim(2) != spec.kernel_size || base_kernel.dim(3) != spec.kernel_size)
        throw std::invalid_argument("lifting_conv: kernel shape mismatch");
    if (x.dim(1) != spec.in_channels) throw std::invalid_argument("lifting_conv: input channel count mismatch");

    const int bn = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int n = x.dim(2), k = spec.kernel_size;
    const int m = spec.output_extent(n);

    GridTensor out({bn, cout, 4, m, m});
    std::vector<double> rk(static_cast<std::size_t>(k) * k);
    for (int s = 0; s < 4; ++s)
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci) {
                rot_plane(base_kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * plane(k), rk.data(), k, s);
                for (int b = 0; b < bn; ++b) {
                    const double* ip = x.data() + (static_cast<std::int64_t>(b) * cin + ci) * plane(n);
                    double* op = out.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + s) * plane(m);
                    detail::conv_plane_accum(ip, n, rk.data(), k, spec.stride, spec.padding, op, m);
                }
            }
    return out;
}

void lifting_conv_backward(const GridTensor& x, const GridTensor& base_kernel, const ConvSpec& spec,
                           const GridTensor& grad_out, GridTensor* grad_x, GridTensor* grad_kernel) {
    const int bn = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int n = x.dim(2), k = spec.kernel_size;
    const int m = spec.output_extent(n);
    if (grad_out.rank() != 5 || grad_out.dim(0) != bn || grad_out.dim(1) != cout || grad_out.dim(2) != 4 ||
        grad_out.dim(3) != m || grad_out.dim(4) != m)
        throw std::invalid_argument("lifting_conv_backward: grad_out shape mismatch");

    std::vector<double> rk(static_cast<std::size_t>(k) * k);
    std::vector<double> grk(static_cast<std::size_t>(k) * k);
    for (int s = 0; s < 4; ++s)
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci) {
                const std::int64_t koff = (static_cast<std::int64_t>(co) * cin + ci) * plane(k);
                if (grad_x != nullptr) {
                    rot_plane(base_kernel.data() + koff, rk.data(), k, s);
                    for (int b = 0; b < bn; ++b) {
                        const double* gop = grad_out.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + s) * plane(m);
                        double* gxp = grad_x->data() + (static_cast<std::int64_t>(b) * cin + ci) * plane(n);
                        detail::conv_plane_scatter(gop, m, rk.data(), k, spec.stride, spec.padding, gxp, n);
                    }
                }
                if (grad_kernel != nullptr) {
                    std::fill(grk.begin(), grk.end(), 0.0);
                    for (int b = 0; b < bn; ++b) {
                        const double* ip = x.data() + (static_cast<std::int64_t>(b) * cin + ci) * plane(n);
                        const double* gop = grad_out.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + s) * plane(m);
                        detail::conv_plane_kernel_grad(ip, n, gop, m, k, spec.stride, spec.padding, grk.data());
                    }
                    unrot_plane_acc(grk.data(), grad_kernel->data() + koff, k, s);
                }
            }
}

GridTensor group_conv(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec) {
    check_group_conv_args(x, kernel, spec, false);
    const int bn = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int n = x.dim(3), k = spec.kernel_size;
    const int m = spec.output_extent(n);

    GridTensor out({bn, cout, 4, m, m});
    std::vector<double> rk(static_cast<std::size_t>(k) * k);
    for (int s = 0; s < 4; ++s)
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int sp = 0; sp < 4; ++sp) {
                    const int kidx = (sp - s + 4) & 3;
                    rot_plane(kernel.data() + ((static_cast<std::int64_t>(co) * cin + ci) * 4 + kidx) * plane(k),
                              rk.data(), k, s);
                    for (int b = 0; b < bn; ++b) {
                        const double* ip = x.data() + ((static_cast<std::int64_t>(b) * cin + ci) * 4 + sp) * plane(n);
                        double* op = out.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + s) * plane(m);
                        detail::conv_plane_accum(ip, n, rk.data(), k, spec.stride, spec.padding, op, m);
                    }
                }
    return out;
}

void group_conv_backward(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec,
                         const GridTensor& grad_out, GridTensor* grad_x, GridTensor* grad_kernel) {
    check_group_conv_args(x, kernel, spec, false);
    const int bn = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int n = x.dim(3), k = spec.kernel_size;
    const int m = spec.output_extent(n);
    if (grad_out.rank() != 5 || grad_out.dim(0) != bn || grad_out.dim(1) != cout || grad_out.dim(2) != 4 ||
        grad_out.dim(3) != m || grad_out.dim(4) != m)
        throw std::invalid_argument("group_conv_backward: grad_out shape mismatch");

    std::vector<double> rk(static_cast<std::size_t>(k) * k);
    std::vector<double> grk(static_cast<std::size_t>(k) * k);
    for (int s = 0; s < 4; ++s)
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int sp = 0; sp < 4; ++sp) {
                    const int kidx = (sp - s + 4) & 3;
                    const std::int64_t koff = ((static_cast<std::int64_t>(co) * cin + ci) * 4 + kidx) * plane(k);
                    if (grad_x != nullptr) {
                        rot_plane(kernel.data() + koff, rk.data(), k, s);
                        for (int b = 0; b < bn; ++b) {
                            const double* gop =
                                grad_out.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + s) * plane(m);
                            double* gxp = grad_x->data() + ((static_cast<std::int64_t>(b) * cin + ci) * 4 + sp) * plane(n);
                            detail::conv_plane_scatter(gop, m, rk.data(), k, spec.stride, spec.padding, gxp, n);
                        }
                    }
                    if (grad_kernel != nullptr) {
                        std::fill(grk.begin(), grk.end(), 0.0);
                        for (int b = 0; b < bn; ++b) {
                            const double* ip = x.data() + ((static_cast<std::int64_t>(b) * cin + ci) * 4 + sp) * plane(n);
                            const double* gop =
                                grad_out.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + s) * plane(m);
                            detail::conv_plane_kernel_grad(ip, n, gop, m, k, spec.stride, spec.padding, grk.data());
                        }
                        unrot_plane_acc(grk.data(), grad_kernel->data() + koff, k, s);
                    }
                }
}

GridTensor group_conv_transpose(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec) {
    check_group_conv_args(x, kernel, spec, true);
    const int bn = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int m = x.dim(3), k = spec.kernel_size;
    const int n = spec.output_extent(m);

    GridTensor out({bn, cin, 4, n, n});
    std::vector<double> rk(static_cast<std::size_t>(k) * k);
    for (int s = 0; s < 4; ++s)
        for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
                for (int sp = 0; sp < 4; ++sp) {
                    const int kidx = (s - sp + 4) & 3;
                    rot_plane(kernel.data() + ((static_cast<std::int64_t>(co) * cin + ci) * 4 + kidx) * plane(k),
                              rk.data(), k, sp);
                    for (int b = 0; b < bn; ++b) {
                        const double* ip = x.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + sp) * plane(m);
                        double* op = out.data() + ((static_cast<std::int64_t>(b) * cin + ci) * 4 + s) * plane(n);
                        detail::conv_plane_scatter(ip, m, rk.data(), k, spec.stride, spec.padding, op, n);
                    }
                }
    return out;
}

void group_conv_transpose_backward(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec,
                                   const GridTensor& grad_out, GridTensor* grad_x, GridTensor* grad_kernel) {
    check_group_conv_args(x, kernel, spec, true);
    const int bn = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
    const int m = x.dim(3), k = spec.kernel_size;
    const int n = spec.output_extent(m);
    if (grad_out.rank() != 5 || grad_out.dim(0) != bn || grad_out.dim(1) != cin || grad_out.dim(2) != 4 ||
        grad_out.dim(3) != n || grad_out.dim(4) != n)
        throw std::invalid_argument("group_conv_transpose_backward: grad_out shape mismatch");

    std::vector<double> rk(static_cast<std::size_t>(k) * k);
    std::vector<double> grk(static_cast<std::size_t>(k) * k);
    for (int s = 0; s < 4; ++s)
        for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
                for (int sp = 0; sp < 4; ++sp) {
                    const int kidx = (s - sp + 4) & 3;
                    const std::int64_t koff = ((static_cast<std::int64_t>(co) * cin + ci) * 4 + kidx) * plane(k);
                    if (grad_x != nullptr) {
                        rot_plane(kernel.data() + koff, rk.data(), k, sp);
                        for (int b = 0; b < bn; ++b) {
                            const double* gop =
                                grad_out.data() + ((static_cast<std::int64_t>(b) * cin + ci) * 4 + s) * plane(n);
                            double* gxp = grad_x->data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + sp) * plane(m);
                            detail::conv_plane_accum(gop, n, rk.data(), k, spec.stride, spec.padding, gxp, m);
                        }
                    }
                    if (grad_kernel != nullptr) {
                        std::fill(grk.begin(), grk.end(), 0.0);
                        for (int b = 0; b < bn; ++b) {
                            const double* ip = x.data() + ((static_cast<std::int64_t>(b) * cout + co) * 4 + sp) * plane(m);
                            const double* gop =
                                grad_out.data() + ((static_cast<std::int64_t>(b) * cin + ci) * 4 + s) * plane(n);
                            detail::conv_plane_kernel_grad(gop, n, ip, m, k, spec.stride, spec.padding, grk.data());
                        }
                        unrot_plane_acc(grk.data(), grad_kernel->data() + koff, k, sp);
                    }
                }
}

BNState::BNState(const std::string& name, int channels)
    : gamma(name + ".gamma", {channels}),
      shift(name + ".shift", {channels}),
      running_mean(std::vector<int>{channels}),
      running_var(std::vector<int>{channels}) {
    gamma.value.fill(1.0);
    running_var.fill(1.0);
}

GridTensor equivariant_batch_norm(const GridTensor& x, BNState& state, bool train, BNTape* tape) {
    if (x.rank() < 2) throw std::invalid_argument("batch_norm: input must have a channel axis");
    const int c_n = x.dim(1);
    if (c_n != state.channels()) throw std::invalid_argument("batch_norm: channel count mismatch");
    const int b_n = x.dim(0);
    std::int64_t rest = 1;
    for (int a = 2; a < x.rank(); ++a) rest *= x.dim(a);
    const std::int64_t m = static_cast<std::int64_t>(b_n) * rest;
    if (train && m < 2) throw std::invalid_argument("batch_norm: need at least two samples in train mode");

    for (double v : x.values())
        if (!std::isfinite(v)) throw std::domain_error("batch_norm: non-finite input");

    GridTensor xhat(x.shape());
    std::vector<double> inv(static_cast<std::size_t>(c_n));
    for (int c = 0; c < c_n; ++c) {
        double mean, var;
        if (train) {
            double s = 0.0;
            for (int b = 0; b < b_n; ++b) {
                const double* p = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
                for (std::int64_t i = 0; i < rest; ++i) s += p[i];
            }
            mean = s / static_cast<double>(m);
            double sq = 0.0;
            for (int b = 0; b < b_n; ++b) {
                const double* p = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
                for (std::int64_t i = 0; i < rest; ++i) {
                    const double d = p[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(m);
            state.running_mean.data()[c] = (1.0 - state.momentum) * state.running_mean.data()[c] + state.momentum * mean;
            state.running_var.data()[c] = (1.0 - state.momentum) * state.running_var.data()[c] + state.momentum * var;
        } else {
            mean = state.running_mean.data()[c];
            var = state.running_var.data()[c];
        }
        inv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + state.eps);
        for (int b = 0; b < b_n; ++b) {
            const double* p = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            double* q = xhat.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            for (std::int64_t i = 0; i < rest; ++i) q[i] = (p[i] - mean) * inv[static_cast<std::size_t>(c)];
        }
    }

    GridTensor out(x.shape());
    for (int c = 0; c < c_n; ++c) {
        const double g = state.gamma.value.data()[c];
        const double sh = state.shift.value.data()[c];
        for (int b = 0; b < b_n; ++b) {
            const double* q = xhat.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            double* o = out.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            for (std::int64_t i = 0; i < rest; ++i) o[i] = g * q[i] + sh;
        }
    }
    if (tape != nullptr) {
        tape->xhat = std::move(xhat);
        tape->inv_std = std::move(inv);
        tape->train = train;
    }
    return out;
}

GridTensor batch_norm_backward(const BNTape& tape, BNState& state, const GridTensor& grad_out) {
    const GridTensor& xhat = tape.xhat;
    if (!grad_out.same_shape(xhat)) throw std::invalid_argument("batch_norm_backward: shape mismatch");
    const int b_n = xhat.dim(0), c_n = xhat.dim(1);
    std::int64_t rest = 1;
    for (int a = 2; a < xhat.rank(); ++a) rest *= xhat.dim(a);
    const double m = static_cast<double>(static_cast<std::int64_t>(b_n) * rest);

    GridTensor gx(xhat.shape());
    for (int c = 0; c < c_n; ++c) {
        double s1 = 0.0, s2 = 0.0;
        for (int b = 0; b < b_n; ++b) {
            const double* g = grad_out.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            const double* q = xhat.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            for (std::int64_t i = 0; i < rest; ++i) {
                s1 += g[i];
                s2 += g[i] * q[i];
            }
        }
        state.shift.grad.data()[c] += s1;
        state.gamma.grad.data()[c] += s2;

        const double ga = state.gamma.value.data()[c];
        const double inv = tape.inv_std[static_cast<std::size_t>(c)];
        for (int b = 0; b < b_n; ++b) {
            const double* g = grad_out.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            const double* q = xhat.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            double* o = gx.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            if (tape.train) {
                for (std::int64_t i = 0; i < rest; ++i) o[i] = ga * inv * (g[i] - s1 / m - q[i] * (s2 / m));
            } else {
                for (std::int64_t i = 0; i < rest; ++i) o[i] = ga * inv * g[i];
            }
        }
    }
    return gx;
}

GridTensor relu(const GridTensor& x) {
    GridTensor out(x.shape());
    const double* p = x.data();
    double* q = out.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) q[i] = p[i] > 0.0 ? p[i] : 0.0;
    return out;
}

GridTensor relu_backward(const GridTensor& pre, const GridTensor& grad_out) {
    if (!pre.same_shape(grad_out)) throw std::invalid_argument("relu_backward: shape mismatch");
    GridTensor gx(pre.shape());
    const double* p = pre.data();
    const double* g = grad_out.data();
    double* q = gx.data();
    for (std::int64_t i = 0; i < pre.numel(); ++i) q[i] = p[i] > 0.0 ? g[i] : 0.0;
    return gx;
}

GridTensor group_pool(const GridTensor& x, GroupPoolMode mode, std::vector<std::uint8_t>* argmax) {
    check_lifted(x);
    const int b_n = x.dim(0), c_n = x.dim(1), n = x.dim(3);
    GridTensor out({b_n, c_n, n, n});
    const std::int64_t pl = plane(n);
    if (argmax != nullptr) argmax->assign(static_cast<std::size_t>(out.numel()), 0);
    for (int b = 0; b < b_n; ++b)
        for (int c = 0; c < c_n; ++c) {
            const double* base = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * 4 * pl;
            double* o = out.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            if (mode == GroupPoolMode::kMax) {
                for (std::int64_t i = 0; i < pl; ++i) {
                    double best = base[i];
                    int bs = 0;
                    for (int s = 1; s < 4; ++s) {
                        const double v = base[s * pl + i];
                        if (v > best) {
                            best = v;
                            bs = s;
                        }
                    }
                    o[i] = best;
                    if (argmax != nullptr)
                        (*argmax)[static_cast<std::size_t>((static_cast<std::int64_t>(b) * c_n + c) * pl + i)] =
                            static_cast<std::uint8_t>(bs);
                }
            } else {
                for (std::int64_t i = 0; i < pl; ++i)
                    o[i] = 0.25 * (base[i] + base[pl + i] + base[2 * pl + i] + base[3 * pl + i]);
            }
        }
    return out;
}

GridTensor group_pool_backward(const GridTensor& grad_out, GroupPoolMode mode,
                               const std::vector<std::uint8_t>& argmax) {
    if (grad_out.rank() != 4) throw std::invalid_argument("group_pool_backward: grad must be [B,C,Y,X]");
    const int b_n = grad_out.dim(0), c_n = grad_out.dim(1), n = grad_out.dim(2);
    if (mode == GroupPoolMode::kMax && static_cast<std::int64_t>(argmax.size()) != grad_out.numel())
        throw std::invalid_argument("group_pool_backward: argmax record mismatch");
    GridTensor gx({b_n, c_n, 4, n, n});
    const std::int64_t pl = plane(n);
    for (int b = 0; b < b_n; ++b)
        for (int c = 0; c < c_n; ++c) {
            const double* g = grad_out.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            double* base = gx.data() + (static_cast<std::int64_t>(b) * c_n + c) * 4 * pl;
            if (mode == GroupPoolMode::kMax) {
                const std::uint8_t* am = argmax.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
                for (std::int64_t i = 0; i < pl; ++i) base[am[i] * pl + i] = g[i];
            } else {
                for (std::int64_t i = 0; i < pl; ++i)
                    for (int s = 0; s < 4; ++s) base[s * pl + i] = 0.25 * g[i];
            }
        }
    return gx;
}

GridTensor avg_pool2(const GridTensor& x) {
    const int r = x.rank();
    if (r < 2) throw std::invalid_argument("avg_pool2: need two trailing spatial axes");
    const int n_y = x.dim(r - 2), n_x = x.dim(r - 1);
    if (n_y % 2 != 0 || n_x % 2 != 0) throw std::invalid_argument("avg_pool2: spatial extents must be even");
    std::vector<int> out_shape = x.shape();
    out_shape[static_cast<std::size_t>(r - 2)] = n_y / 2;
    out_shape[static_cast<std::size_t>(r - 1)] = n_x / 2;
    GridTensor out(out_shape);

    const std::int64_t planes = x.numel() / (static_cast<std::int64_t>(n_y) * n_x);
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* ip = x.data() + p * n_y * n_x;
        double* op = out.data() + p * (n_y / 2) * (n_x / 2);
        for (int y = 0; y < n_y / 2; ++y)
            for (int x_i = 0; x_i < n_x / 2; ++x_i) {
                const double* r0 = ip + static_cast<std::int64_t>(2 * y) * n_x + 2 * x_i;
                const double* r1 = r0 + n_x;
                op[static_cast<std::int64_t>(y) * (n_x / 2) + x_i] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
            }
    }
    return out;
}

GridTensor avg_pool2_backward(const GridTensor& grad_out, const std::vector<int>& in_shape) {
    GridTensor gx(in_shape);
    const int r = gx.rank();
    const int n_y = gx.dim(r - 2), n_x = gx.dim(r - 1);
    if (grad_out.dim(r - 2) != n_y / 2 || grad_out.dim(r - 1) != n_x / 2)
        throw std::invalid_argument("avg_pool2_backward: shape mismatch");
    const std::int64_t planes = gx.numel() / (static_cast<std::int64_t>(n_y) * n_x);
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* gp = grad_out.data() + p * (n_y / 2) * (n_x / 2);
        double* xp = gx.data() + p * n_y * n_x;
        for (int y = 0; y < n_y; ++y)
            for (int x_i = 0; x_i < n_x; ++x_i)
                xp[static_cast<std::int64_t>(y) * n_x + x_i] =
                    0.25 * gp[static_cast<std::int64_t>(y / 2) * (n_x / 2) + x_i / 2];
    }
    return gx;
}

GridTensor unpool2(const GridTensor& x) {
    const int r = x.rank();
    if (r < 2) throw std::invalid_argument("unpool2: need two trailing spatial axes");
    const int n_y = x.dim(r - 2), n_x = x.dim(r - 1);
    std::vector<int> out_shape = x.shape();
    out_shape[static_cast<std::size_t>(r - 2)] = 2 * n_y;
    out_shape[static_cast<std::size_t>(r - 1)] = 2 * n_x;
    GridTensor out(out_shape);

    const std::int64_t planes = x.numel() / (static_cast<std::int64_t>(n_y) * n_x);
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* ip = x.data() + p * n_y * n_x;
        double* op = out.data() + p * 4 * n_y * n_x;
        for (int y = 0; y < 2 * n_y; ++y)
            for (int x_i = 0; x_i < 2 * n_x; ++x_i)
                op[static_cast<std::int64_t>(y) * 2 * n_x + x_i] = ip[static_cast<std::int64_t>(y / 2) * n_x + x_i / 2];
    }
    return out;
}

GridTensor unpool2_backward(const GridTensor& grad_out, const std::vector<int>& in_shape) {
    GridTensor gx(in_shape);
    const int r = gx.rank();
    const int n_y = gx.dim(r - 2), n_x = gx.dim(r - 1);
    if (grad_out.dim(r - 2) != 2 * n_y || grad_out.dim(r - 1) != 2 * n_x)
        throw std::invalid_argument("unpool2_backward: shape mismatch");
    const std::int64_t planes = gx.numel() / (static_cast<std::int64_t>(n_y) * n_x);
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* gp = grad_out.data() + p * 4 * n_y * n_x;
        double* xp = gx.data() + p * n_y * n_x;
        for (int y = 0; y < 2 * n_y; ++y)
            for (int x_i = 0; x_i < 2 * n_x; ++x_i)
                xp[static_cast<std::int64_t>(y / 2) * n_x + x_i / 2] += gp[static_cast<std::int64_t>(y) * 2 * n_x + x_i];
    }
    return gx;
}

GridTensor concat_channels(const std::vector<const GridTensor*>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const GridTensor& first = *xs.front();
    int c_total = 0;
    for (const GridTensor* t : xs) {
        if (t->rank() != first.rank() || t->dim(0) != first.dim(0))
            throw std::invalid_argument("concat_channels: rank/batch mismatch");
        for (int a = 2; a < first.rank(); ++a)
            if (t->dim(a) != first.dim(a)) throw std::invalid_argument("concat_channels: trailing axis mismatch");
        c_total += t->dim(1);
    }
    std::vector<int> out_shape = first.shape();
    out_shape[1] = c_total;
    GridTensor out(out_shape);

    std::int64_t rest = 1;
    for (int a = 2; a < first.rank(); ++a) rest *= first.dim(a);
    const int b_n = first.dim(0);
    for (int b = 0; b < b_n; ++b) {
        double* op = out.data() + static_cast<std::int64_t>(b) * c_total * rest;
        for (const GridTensor* t : xs) {
            const std::int64_t block = static_cast<std::int64_t>(t->dim(1)) * rest;
            const double* ip = t->data() + static_cast<std::int64_t>(b) * block;
            std::copy(ip, ip + block, op);
            op += block;
        }
    }
    return out;
}

std::vector<GridTensor> split_channels(const GridTensor& x, const std::vector<int>& widths) {
    int c_total = 0;
    for (int w : widths) c_total += w;
    if (c_total != x.dim(1)) throw std::invalid_argument("split_channels: widths do not sum to channel count");
    std::int64_t rest = 1;
    for (int a = 2; a < x.rank(); ++a) rest *= x.dim(a);
    const int b_n = x.dim(0);

    std::vector<GridTensor> parts;
    parts.reserve(widths.size());
    std::int64_t c_off = 0;
    for (int w : widths) {
        std::vector<int> shape = x.shape();
        shape[1] = w;
        GridTensor part(shape);
        const std::int64_t block = static_cast<std::int64_t>(w) * rest;
        for (int b = 0; b < b_n; ++b) {
            const double* ip = x.data() + (static_cast<std::int64_t>(b) * c_total + c_off) * rest;
            std::copy(ip, ip + block, part.data() + static_cast<std::int64_t>(b) * block);
        }
        parts.push_back(std::move(part));
        c_off += w;
    }
    return parts;
}

void BackboneConfig::validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("BackboneConfig: kernel must be odd");
    for (int w : widths)
        if (w < 1) throw std::invalid_argument("BackboneConfig: widths must be >= 1");
}

BackboneWeights::BackboneWeights(const BackboneConfig& config, int input_channels)
    : cfg(config), in_channels(input_channels) {
    cfg.validate();
    if (input_channels < 1) throw std::invalid_argument("BackboneWeights: input channels must be >= 1");
    const int k = cfg.kernel_size;
    const int w1 = cfg.stage_width(0), w2 = cfg.stage_width(1), w3 = cfg.stage_width(2);
    blocks.reserve(6);
    if (!cfg.plain) {
        blocks.emplace_back("backbone.lift", std::vector<int>{w1, in_channels, k, k}, w1);
        blocks.emplace_back("backbone.stage1", std::vector<int>{w1, w1, 4, k, k}, w1);
        blocks.emplace_back("backbone.stage2", std::vector<int>{w2, w1, 4, k, k}, w2);
        blocks.emplace_back("backbone.stage3", std::vector<int>{w3, w2, 4, k, k}, w3);
        blocks.emplace_back("backbone.up2", std::vector<int>{w2, w2, 4, k, k}, w2);
        blocks.emplace_back("backbone.up3", std::vector<int>{w3, w3, 4, k, k}, w3);
    } else {
        blocks.emplace_back("backbone.lift", std::vector<int>{w1, in_channels, k, k}, w1);
        blocks.emplace_back("backbone.stage1", std::vector<int>{w1, w1, k, k}, w1);
        blocks.emplace_back("backbone.stage2", std::vector<int>{w2, w1, k, k}, w2);
        blocks.emplace_back("backbone.stage3", std::vector<int>{w3, w2, k, k}, w3);
        blocks.emplace_back("backbone.up2", std::vector<int>{w2, w2, k, k}, w2);
        blocks.emplace_back("backbone.up3", std::vector<int>{w3, w3, k, k}, w3);
    }
}

void BackboneWeights::collect(ParamRefs& refs) {
    for (Block& b : blocks) {
        refs.push_back(&b.kernel);
        b.bn.collect(refs);
    }
}

void BackboneWeights::init(CounterRng& rng) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        Param& kp = blocks[i].kernel;
        const std::int64_t fan = kp.value.numel() / kp.value.dim(0);
        kp.init_normal(rng, std::sqrt(2.0 / static_cast<double>(fan)));
    }
}

namespace {

ConvSpec block_spec(const BackboneWeights& w, int i) {
    ConvSpec spec;
    spec.kernel_size = w.cfg.kernel_size;
    spec.stride = 1;
    spec.padding = (w.cfg.kernel_size - 1) / 2;
    const int w1 = w.cfg.stage_width(0), w2 = w.cfg.stage_width(1), w3 = w.cfg.stage_width(2);
    switch (i) {
        case 0: spec.in_channels = w.in_channels; spec.out_channels = w1; break;
        case 1: spec.in_channels = w1; spec.out_channels = w1; break;
        case 2: spec.in_channels = w1; spec.out_channels = w2; break;
        case 3: spec.in_channels = w2; spec.out_channels = w3; break;
        case 4: spec.in_channels = w2; spec.out_channels = w2; spec.transposed = true; break;
        case 5: spec.in_channels = w3; spec.out_channels = w3; spec.transposed = true; break;
        default: throw std::logic_error("block_spec: bad index");
    }
    return spec;
}

GridTensor apply_block_conv(const BackboneWeights& w, int i, const GridTensor& in) {
    const ConvSpec spec = block_spec(w, i);
    if (w.cfg.plain) {
        return spec.transposed ? conv2d_transpose(in, w.blocks[static_cast<std::size_t>(i)].kernel.value, spec)
                               : conv2d(in, w.blocks[static_cast<std::size_t>(i)].kernel.value, spec);
    }
    if (i == 0) return lifting_conv(in, w.blocks[0].kernel.value, spec);
    return spec.transposed ? group_conv_transpose(in, w.blocks[static_cast<std::size_t>(i)].kernel.value, spec)
                           : group_conv(in, w.blocks[static_cast<std::size_t>(i)].kernel.value, spec);
}

void apply_block_conv_backward(BackboneWeights& w, int i, const GridTensor& in, const GridTensor& grad_out,
                               GridTensor* grad_in) {
    const ConvSpec spec = block_spec(w, i);
    Param& kp = w.blocks[static_cast<std::size_t>(i)].kernel;
    if (w.cfg.plain) {
        const ConvGrads g = spec.transposed ? conv2d_transpose_backward(in, kp.value, spec, grad_out)
                                            : conv2d_backward(in, kp.value, spec, grad_out);
        if (grad_in != nullptr) grad_in->add_scaled(g.input, 1.0);
        kp.grad.add_scaled(g.kernel, 1.0);
        return;
    }
    if (i == 0) {
        lifting_conv_backward(in, kp.value, spec, grad_out, grad_in, &kp.grad);
    } else if (spec.transposed) {
        group_conv_transpose_backward(in, kp.value, spec, grad_out, grad_in, &kp.grad);
    } else {
        group_conv_backward(in, kp.value, spec, grad_out, grad_in, &kp.grad);
    }
}

}  // namespace

GridTensor backbone_forward(const GridTensor& x, BackboneWeights& w, bool train, BackboneTape* tape) {
    if (x.rank() != 4) throw std::invalid_argument("backbone_forward: input must be [B,C,Y,X]");
    if (x.dim(1) != w.in_channels) throw std::invalid_argument("backbone_forward: channel count mismatch");
    if (x.dim(2) != x.dim(3)) throw std::invalid_argument("backbone_forward: spatial extent must be square");
    if (x.dim(2) % 4 != 0) throw std::invalid_argument("backbone_forward: spatial extent must be divisible by 4");

    BackboneTape local;
    BackboneTape& t = tape != nullptr ? *tape : local;
    t.conv_in.clear();
    t.pre_relu.clear();
    t.bn.clear();
    t.stage_out.clear();
    t.conv_in.resize(6, GridTensor(std::vector<int>{1}));
    t.pre_relu.resize(6, GridTensor(std::vector<int>{1}));
    t.bn.resize(6);
    t.x_in = x;

    auto run_block = [&](int i, const GridTensor& in) {
        t.conv_in[static_cast<std::size_t>(i)] = in;
        GridTensor c = apply_block_conv(w, i, in);
        GridTensor n = equivariant_batch_norm(c, w.blocks[static_cast<std::size_t>(i)].bn, train,
                                              &t.bn[static_cast<std::size_t>(i)]);
        t.pre_relu[static_cast<std::size_t>(i)] = n;
        return relu(n);
    };

    const GridTensor a0 = run_block(0, x);
    const GridTensor s1 = run_block(1, a0);
    const GridTensor d1 = avg_pool2(s1);
    const GridTensor s2 = run_block(2, d1);
    const GridTensor d2 = avg_pool2(s2);
    const GridTensor s3 = run_block(3, d2);
    const GridTensor u2 = unpool2(run_block(4, s2));
    const GridTensor u3 = unpool2(unpool2(run_block(5, s3)));

    t.stage_out.push_back(s1);
    t.stage_out.push_back(s2);
    t.stage_out.push_back(s3);

    const GridTensor cat = concat_channels({&s1, &u2, &u3});
    t.cat_shape = cat.shape();
    if (w.cfg.plain) return cat;
    return group_pool(cat, w.cfg.mean_pool ? GroupPoolMode::kMean : GroupPoolMode::kMax, &t.pool_argmax);
}

GridTensor backbone_backward(const BackboneTape& t, BackboneWeights& w, const GridTensor& grad_out) {
    GridTensor g_cat = w.cfg.plain
                           ? grad_out
                           : group_pool_backward(grad_out, w.cfg.mean_pool ? GroupPoolMode::kMean : GroupPoolMode::kMax,
                                                 t.pool_argmax);
    if (g_cat.shape() != t.cat_shape) throw std::invalid_argument("backbone_backward: grad shape mismatch");

    const std::vector<int> widths{w.cfg.stage_width(0), w.cfg.stage_width(1), w.cfg.stage_width(2)};
    std::vector<GridTensor> parts = split_channels(g_cat, widths);

    auto block_backward = [&](int i, GridTensor g, GridTensor* grad_in) {
        g = relu_backward(t.pre_relu[static_cast<std::size_t>(i)], g);
        g = batch_norm_backward(t.bn[static_cast<std::size_t>(i)], w.blocks[static_cast<std::size_t>(i)].bn, g);
        apply_block_conv_backward(w, i, t.conv_in[static_cast<std::size_t>(i)], g, grad_in);
    };

    const GridTensor& s1 = t.stage_out[0];
    const GridTensor& s2 = t.stage_out[1];
    const GridTensor& s3 = t.stage_out[2];

    // up3 path into S3
    GridTensor g_s3(s3.shape());
    {
        std::vector<int> mid_shape = parts[2].shape();
        const int r = static_cast<int>(mid_shape.size());
        mid_shape[static_cast<std::size_t>(r - 2)] /= 2;
        mid_shape[static_cast<std::size_t>(r - 1)] /= 2;
        GridTensor g = unpool2_backward(parts[2], mid_shape);
        std::vector<int> low_shape = mid_shape;
        low_shape[static_cast<std::size_t>(r - 2)] /= 2;
        low_shape[static_cast<std::size_t>(r - 1)] /= 2;
        g = unpool2_backward(g, low_shape);
        block_backward(5, std::move(g), &g_s3);
    }

    // up2 path into S2
    GridTensor g_s2(s2.shape());
    {
        std::vector<int> mid_shape = parts[1].shape();
        const int r = static_cast<int>(mid_shape.size());
        mid_shape[static_cast<std::size_t>(r - 2)] /= 2;
        mid_shape[static_cast<std::size_t>(r - 1)] /= 2;
        GridTensor g = unpool2_backward(parts[1], mid_shape);
        block_backward(4, std::move(g), &g_s2);
    }

    // stage3 chain adds into S2 through the pooling
    {
        GridTensor g_d2(t.conv_in[3].shape());
        block_backward(3, g_s3, &g_d2);
        g_s2.add_scaled(avg_pool2_backward(g_d2, s2.shape()), 1.0);
    }

    // stage2 chain adds into S1
    GridTensor g_s1 = parts[0];
    {
        GridTensor g_d1(t.conv_in[2].shape());
        block_backward(2, g_s2, &g_d1);
        g_s1.add_scaled(avg_pool2_backward(g_d1, s1.shape()), 1.0);
    }

    // stage1 chain into A0, then the lift into the input
    GridTensor g_a0(t.conv_in[1].shape());
    block_backward(1, g_s1, &g_a0);
    GridTensor g_x(t.x_in.shape());
    block_backward(0, g_a0, &g_x);
    return g_x;
}

}  // namespace eqdet
