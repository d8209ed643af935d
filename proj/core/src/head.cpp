#include "eqdet/head.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eqdet {

namespace {

// out[b,o,rest] = sum_c W[o,c] * x[b,c,rest] (+ bias[o]); rest covers every
// axis after the channel axis, so this is a shared 1x1 map on planar and
// lifted tensors alike.
GridTensor channelwise_linear(const GridTensor& x, const GridTensor& w, const GridTensor* bias) {
    const int c_n = x.dim(1);
    if (w.rank() != 2 || w.dim(1) != c_n) throw std::invalid_argument("channelwise_linear: weight shape mismatch");
    const int o_n = w.dim(0);
    const int b_n = x.dim(0);
    std::int64_t rest = 1;
    for (int a = 2; a < x.rank(); ++a) rest *= x.dim(a);

    std::vector<int> out_shape = x.shape();
    out_shape[1] = o_n;
    GridTensor out(out_shape);
    for (int b = 0; b < b_n; ++b)
        for (int o = 0; o < o_n; ++o) {
            double* op = out.data() + (static_cast<std::int64_t>(b) * o_n + o) * rest;
            if (bias != nullptr) {
                const double bv = bias->data()[o];
                for (std::int64_t i = 0; i < rest; ++i) op[i] = bv;
            }
            for (int c = 0; c < c_n; ++c) {
                const double wv = w.data()[static_cast<std::int64_t>(o) * c_n + c];
                const double* ip = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
                for (std::int64_t i = 0; i < rest; ++i) op[i] += wv * ip[i];
            }
        }
    return out;
}

void channelwise_linear_backward(const GridTensor& x, const GridTensor& w, const GridTensor& grad_out,
                                 GridTensor* grad_x, GridTensor* grad_w, GridTensor* grad_bias) {
    const int c_n = x.dim(1), o_n = w.dim(0), b_n = x.dim(0);
    std::int64_t rest = 1;
    for (int a = 2; a < x.rank(); ++a) rest *= x.dim(a);
    for (int b = 0; b < b_n; ++b)
        for (int o = 0; o < o_n; ++o) {
            const double* gp = grad_out.data() + (static_cast<std::int64_t>(b) * o_n + o) * rest;
            if (grad_bias != nullptr) {
                double s = 0.0;
                for (std::int64_t i = 0; i < rest; ++i) s += gp[i];
                grad_bias->data()[o] += s;
            }
            for (int c = 0; c < c_n; ++c) {
                const double wv = w.data()[static_cast<std::int64_t>(o) * c_n + c];
                const double* ip = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
                double acc = 0.0;
                if (grad_x != nullptr) {
                    double* xp = grad_x->data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
                    for (std::int64_t i = 0; i < rest; ++i) {
                        xp[i] += wv * gp[i];
                        acc += gp[i] * ip[i];
                    }
                } else {
                    for (std::int64_t i = 0; i < rest; ++i) acc += gp[i] * ip[i];
                }
                if (grad_w != nullptr) grad_w->data()[static_cast<std::int64_t>(o) * c_n + c] += acc;
            }
        }
}

void add_channel_bias(GridTensor& x, const GridTensor& bias) {
    const int c_n = x.dim(1), b_n = x.dim(0);
    std::int64_t rest = 1;
    for (int a = 2; a < x.rank(); ++a) rest *= x.dim(a);
    for (int b = 0; b < b_n; ++b)
        for (int c = 0; c < c_n; ++c) {
            const double bv = bias.data()[c];
            double* p = x.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            for (std::int64_t i = 0; i < rest; ++i) p[i] += bv;
        }
}

void channel_bias_grad(const GridTensor& grad, GridTensor& grad_bias) {
    const int c_n = grad.dim(1), b_n = grad.dim(0);
    std::int64_t rest = 1;
    for (int a = 2; a < grad.rank(); ++a) rest *= grad.dim(a);
    for (int b = 0; b < b_n; ++b)
        for (int c = 0; c < c_n; ++c) {
            const double* p = grad.data() + (static_cast<std::int64_t>(b) * c_n + c) * rest;
            double s = 0.0;
            for (std::int64_t i = 0; i < rest; ++i) s += p[i];
            grad_bias.data()[c] += s;
        }
}

// v(cell) = sum_s q_s(cell) * u(s) with u(s) = (cos(-90 s), sin(-90 s)):
// u = (1,0), (0,-1), (-1,0), (0,1). Under a quarter-turn of the scene the
// slices shift cyclically and v rotates by exactly +90 degrees.
GridTensor combine_direction(const GridTensor& q) {
    check_lifted(q);
    if (q.dim(1) != 1) throw std::invalid_argument("combine_direction: expected a single score channel");
    const int b_n = q.dim(0), n = q.dim(3);
    const std::int64_t pl = static_cast<std::int64_t>(n) * n;
    GridTensor v({b_n, 2, n, n});
    for (int b = 0; b < b_n; ++b) {
        const double* q0 = q.data() + (static_cast<std::int64_t>(b) * 4 + 0) * pl;
        const double* q1 = q0 + pl;
        const double* q2 = q0 + 2 * pl;
        const double* q3 = q0 + 3 * pl;
        double* vx = v.data() + static_cast<std::int64_t>(b) * 2 * pl;
        double* vy = vx + pl;
        for (std::int64_t i = 0; i < pl; ++i) {
            vx[i] = q0[i] - q2[i];
            vy[i] = q3[i] - q1[i];
        }
    }
    return v;
}

GridTensor combine_direction_backward(const GridTensor& grad_v, int n) {
    const int b_n = grad_v.dim(0);
    const std::int64_t pl = static_cast<std::int64_t>(n) * n;
    GridTensor gq({b_n, 1, 4, n, n});
    for (int b = 0; b < b_n; ++b) {
        const double* gx = grad_v.data() + static_cast<std::int64_t>(b) * 2 * pl;
        const double* gy = gx + pl;
        double* q0 = gq.data() + static_cast<std::int64_t>(b) * 4 * pl;
        double* q1 = q0 + pl;
        double* q2 = q0 + 2 * pl;
        double* q3 = q0 + 3 * pl;
        for (std::int64_t i = 0; i < pl; ++i) {
            q0[i] = gx[i];
            q2[i] = -gx[i];
            q3[i] = gy[i];
            q1[i] = -gy[i];
        }
    }
    return gq;
}

GridTensor tanh_map(const GridTensor& x) {
    GridTensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::tanh(x.data()[i]);
    return out;
}

GridTensor tanh_backward(const GridTensor& y, const GridTensor& grad) {
    GridTensor gx(y.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) gx.data()[i] = grad.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
    return gx;
}

GridTensor sigmoid_map(const GridTensor& x) {
    GridTensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
    return out;
}

constexpr double kFocalClamp = 1e-6;

}  // namespace

void HeadConfig::validate() const {
    if (n_classes < 1 || trunk_channels < 1 || vector_hidden < 1)
        throw std::invalid_argument("HeadConfig: sizes must be >= 1");
}

HeadWeights::HeadWeights(const HeadConfig& config, int input_channels)
    : cfg(config),
      in_channels(input_channels),
      trunk1_kernel("head.trunk1.kernel",
                    config.plain ? std::vector<int>{config.trunk_width(), input_channels, 3, 3}
                                 : std::vector<int>{config.trunk_channels, input_channels, 3, 3}),
      trunk1_bias("head.trunk1.bias", {config.trunk_width()}),
      trunk2_kernel("head.trunk2.kernel",
                    config.plain ? std::vector<int>{config.trunk_width(), config.trunk_width(), 3, 3}
                                 : std::vector<int>{config.trunk_channels, config.trunk_channels, 4, 3, 3}),
      trunk2_bias("head.trunk2.bias", {config.trunk_width()}),
      heatmap_w("head.heatmap.w", {config.n_classes, config.trunk_width()}),
      heatmap_b("head.heatmap.b", {config.n_classes}),
      size_w("head.size.w", {3, config.trunk_width()}),
      size_b("head.size.b", {3}),
      z_w("head.z.w", {1, config.trunk_width()}),
      z_b("head.z.b", {1}),
      offset_w1("head.offset.w1",
                config.plain ? std::vector<int>{2, config.trunk_width()}
                             : std::vector<int>{config.vector_hidden, config.trunk_channels}),
      offset_b1("head.offset.b1", {config.plain ? 2 : config.vector_hidden}),
      offset_w2("head.offset.w2", {1, config.vector_hidden}),
      yaw_w1("head.yaw.w1", config.plain ? std::vector<int>{2, config.trunk_width()}
                                         : std::vector<int>{config.vector_hidden, config.trunk_channels}),
      yaw_b1("head.yaw.b1", {config.plain ? 2 : config.vector_hidden}),
      yaw_w2("head.yaw.w2", {1, config.vector_hidden}) {
    cfg.validate();
    if (input_channels < 1) throw std::invalid_argument("HeadWeights: input channels must be >= 1");
}

void HeadWeights::collect(ParamRefs& refs) {
    refs.push_back(&trunk1_kernel);
    refs.push_back(&trunk1_bias);
    refs.push_back(&trunk2_kernel);
    refs.push_back(&trunk2_bias);
    refs.push_back(&heatmap_w);
    refs.push_back(&heatmap_b);
    refs.push_back(&size_w);
    refs.push_back(&size_b);
    refs.push_back(&z_w);
    refs.push_back(&z_b);
    refs.push_back(&offset_w1);
    refs.push_back(&offset_b1);
    refs.push_back(&yaw_w1);
    refs.push_back(&yaw_b1);
    if (!cfg.plain) {
        refs.push_back(&offset_w2);
        refs.push_back(&yaw_w2);
    }
}

void HeadWeights::init(CounterRng& rng) {
    const auto he = [&](Param& p, std::int64_t fan) { p.init_normal(rng, std::sqrt(2.0 / static_cast<double>(fan))); };
    he(trunk1_kernel, trunk1_kernel.value.numel() / trunk1_kernel.value.dim(0));
    he(trunk2_kernel, trunk2_kernel.value.numel() / trunk2_kernel.value.dim(0));
    const auto lin = [&](Param& p) { p.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(p.value.dim(1)))); };
    lin(heatmap_w);
    lin(size_w);
    lin(z_w);
    lin(offset_w1);
    lin(yaw_w1);
    if (!cfg.plain) {
        lin(offset_w2);
        lin(yaw_w2);
    }
    // start the heatmap near probability 0.1 so the focal loss is not
    // swamped by background cells early on
    heatmap_b.value.fill(std::log(0.1 / 0.9));
}

HeadOutput head_forward(const GridTensor& bev, HeadWeights& w, HeadTape* tape) {
    if (bev.rank() != 4) throw std::invalid_argument("head_forward: input must be [B,C,Y,X]");
    if (bev.dim(1) != w.in_channels) throw std::invalid_argument("head_forward: channel count mismatch");
    if (bev.dim(2) != bev.dim(3)) throw std::invalid_argument("head_forward: spatial extent must be square");

    HeadTape local;
    HeadTape& t = tape != nullptr ? *tape : local;
    t.bev = bev;

    HeadOutput out;
    if (!w.cfg.plain) {
        ConvSpec spec1{w.in_channels, w.cfg.trunk_channels, 3, 1, 1, false};
        GridTensor pre1 = lifting_conv(bev, w.trunk1_kernel.value, spec1);
        add_channel_bias(pre1, w.trunk1_bias.value);
        t.pre1 = std::move(pre1);
        t.a1 = relu(t.pre1);

        ConvSpec spec2{w.cfg.trunk_channels, w.cfg.trunk_channels, 3, 1, 1, false};
        GridTensor pre2 = group_conv(t.a1, w.trunk2_kernel.value, spec2);
        add_channel_bias(pre2, w.trunk2_bias.value);
        t.pre2 = std::move(pre2);
        t.trunk = relu(t.pre2);

        out.heatmap = sigmoid_map(group_pool(channelwise_linear(t.trunk, w.heatmap_w.value, &w.heatmap_b.value),
                                             GroupPoolMode::kMean));
        out.size_log = group_pool(channelwise_linear(t.trunk, w.size_w.value, &w.size_b.value), GroupPoolMode::kMean);
        out.z_center = group_pool(channelwise_linear(t.trunk, w.z_w.value, &w.z_b.value), GroupPoolMode::kMean);

        t.offset_h = tanh_map(channelwise_linear(t.trunk, w.offset_w1.value, &w.offset_b1.value));
        GridTensor v = combine_direction(channelwise_linear(t.offset_h, w.offset_w2.value, nullptr));
        for (std::int64_t i = 0; i < v.numel(); ++i) v.data()[i] += 0.5;
        out.offset = std::move(v);

        t.yaw_h = tanh_map(channelwise_linear(t.trunk, w.yaw_w1.value, &w.yaw_b1.value));
        const GridTensor wv = combine_direction(channelwise_linear(t.yaw_h, w.yaw_w2.value, nullptr));
        const int b_n = wv.dim(0), n = wv.dim(2);
        const std::int64_t pl = static_cast<std::int64_t>(n) * n;
        GridTensor yv({b_n, 2, n, n});
        for (int b = 0; b < b_n; ++b) {
            const double* wx = wv.data() + static_cast<std::int64_t>(b) * 2 * pl;
            const double* wy = wx + pl;
            double* sv = yv.data() + static_cast<std::int64_t>(b) * 2 * pl;
            double* cv = sv + pl;
            for (std::int64_t i = 0; i < pl; ++i) {
                sv[i] = wy[i];
                cv[i] = wx[i];
            }
        }
        out.yaw_vec = std::move(yv);
    } else {
        ConvSpec spec1{w.in_channels, w.cfg.trunk_width(), 3, 1, 1, false};
        GridTensor pre1 = conv2d(bev, w.trunk1_kernel.value, spec1);
        add_channel_bias(pre1, w.trunk1_bias.value);
        t.pre1 = std::move(pre1);
        t.a1 = relu(t.pre1);

        ConvSpec spec2{w.cfg.trunk_width(), w.cfg.trunk_width(), 3, 1, 1, false};
        GridTensor pre2 = conv2d(t.a1, w.trunk2_kernel.value, spec2);
        add_channel_bias(pre2, w.trunk2_bias.value);
        t.pre2 = std::move(pre2);
        t.trunk = relu(t.pre2);

        out.heatmap = sigmoid_map(channelwise_linear(t.trunk, w.heatmap_w.value, &w.heatmap_b.value));
        out.size_log = channelwise_linear(t.trunk, w.size_w.value, &w.size_b.value);
        out.z_center = channelwise_linear(t.trunk, w.z_w.value, &w.z_b.value);
        out.offset = channelwise_linear(t.trunk, w.offset_w1.value, &w.offset_b1.value);
        out.yaw_vec = channelwise_linear(t.trunk, w.yaw_w1.value, &w.yaw_b1.value);
    }
    t.hm = out.heatmap;
    return out;
}

GridTensor head_backward(const HeadTape& t, HeadWeights& w, const HeadOutputGrads& grads) {
    GridTensor g_trunk(t.trunk.shape());

    // sigmoid backward shared by both paths
    GridTensor g_logits(grads.heatmap.shape());
    for (std::int64_t i = 0; i < g_logits.numel(); ++i) {
        const double p = t.hm.data()[i];
        g_logits.data()[i] = grads.heatmap.data()[i] * p * (1.0 - p);
    }

    if (!w.cfg.plain) {
        const int n = t.trunk.dim(3);
        const std::vector<std::uint8_t> no_argmax;

        channelwise_linear_backward(t.trunk, w.heatmap_w.value,
                                    group_pool_backward(g_logits, GroupPoolMode::kMean, no_argmax), &g_trunk,
                                    &w.heatmap_w.grad, &w.heatmap_b.grad);
        channelwise_linear_backward(t.trunk, w.size_w.value,
                                    group_pool_backward(grads.size_log, GroupPoolMode::kMean, no_argmax), &g_trunk,
                                    &w.size_w.grad, &w.size_b.grad);
        channelwise_linear_backward(t.trunk, w.z_w.value,
                                    group_pool_backward(grads.z_center, GroupPoolMode::kMean, no_argmax), &g_trunk,
                                    &w.z_w.grad, &w.z_b.grad);

        {
            const GridTensor gq = combine_direction_backward(grads.offset, n);
            GridTensor gh(t.offset_h.shape());
            channelwise_linear_backward(t.offset_h, w.offset_w2.value, gq, &gh, &w.offset_w2.grad, nullptr);
            const GridTensor gpre = tanh_backward(t.offset_h, gh);
            channelwise_linear_backward(t.trunk, w.offset_w1.value, gpre, &g_trunk, &w.offset_w1.grad,
                                        &w.offset_b1.grad);
        }
        {
            const int b_n = grads.yaw_vec.dim(0);
            const std::int64_t pl = static_cast<std::int64_t>(n) * n;
            GridTensor gv({b_n, 2, n, n});
            for (int b = 0; b < b_n; ++b) {
                const double* gs = grads.yaw_vec.data() + static_cast<std::int64_t>(b) * 2 * pl;
                const double* gc = gs + pl;
                double* gx = gv.data() + static_cast<std::int64_t>(b) * 2 * pl;
                double* gy = gx + pl;
                for (std::int64_t i = 0; i < pl; ++i) {
                    gx[i] = gc[i];
                    gy[i] = gs[i];
                }
            }
            const GridTensor gq = combine_direction_backward(gv, n);
            GridTensor gh(t.yaw_h.shape());
            channelwise_linear_backward(t.yaw_h, w.yaw_w2.value, gq, &gh, &w.yaw_w2.grad, nullptr);
            const GridTensor gpre = tanh_backward(t.yaw_h, gh);
            channelwise_linear_backward(t.trunk, w.yaw_w1.value, gpre, &g_trunk, &w.yaw_w1.grad, &w.yaw_b1.grad);
        }

        GridTensor g = relu_backward(t.pre2, g_trunk);
        channel_bias_grad(g, w.trunk2_bias.grad);
        GridTensor g_a1(t.a1.shape());
        ConvSpec spec2{w.cfg.trunk_channels, w.cfg.trunk_channels, 3, 1, 1, false};
        group_conv_backward(t.a1, w.trunk2_kernel.value, spec2, g, &g_a1, &w.trunk2_kernel.grad);

        g = relu_backward(t.pre1, g_a1);
        channel_bias_grad(g, w.trunk1_bias.grad);
        GridTensor g_bev(t.bev.shape());
        ConvSpec spec1{w.in_channels, w.cfg.trunk_channels, 3, 1, 1, false};
        lifting_conv_backward(t.bev, w.trunk1_kernel.value, spec1, g, &g_bev, &w.trunk1_kernel.grad);
        return g_bev;
    }

    channelwise_linear_backward(t.trunk, w.heatmap_w.value, g_logits, &g_trunk, &w.heatmap_w.grad, &w.heatmap_b.grad);
    channelwise_linear_backward(t.trunk, w.size_w.value, grads.size_log, &g_trunk, &w.size_w.grad, &w.size_b.grad);
    channelwise_linear_backward(t.trunk, w.z_w.value, grads.z_center, &g_trunk, &w.z_w.grad, &w.z_b.grad);
    channelwise_linear_backward(t.trunk, w.offset_w1.value, grads.offset, &g_trunk, &w.offset_w1.grad,
                                &w.offset_b1.grad);
    channelwise_linear_backward(t.trunk, w.yaw_w1.value, grads.yaw_vec, &g_trunk, &w.yaw_w1.grad, &w.yaw_b1.grad);

    GridTensor g = relu_backward(t.pre2, g_trunk);
    channel_bias_grad(g, w.trunk2_bias.grad);
    GridTensor g_a1(t.a1.shape());
    ConvSpec spec2{w.cfg.trunk_width(), w.cfg.trunk_width(), 3, 1, 1, false};
    {
        const ConvGrads cg = conv2d_backward(t.a1, w.trunk2_kernel.value, spec2, g);
        g_a1.add_scaled(cg.input, 1.0);
        w.trunk2_kernel.grad.add_scaled(cg.kernel, 1.0);
    }
    g = relu_backward(t.pre1, g_a1);
    channel_bias_grad(g, w.trunk1_bias.grad);
    ConvSpec spec1{w.in_channels, w.cfg.trunk_width(), 3, 1, 1, false};
    const ConvGrads cg = conv2d_backward(t.bev, w.trunk1_kernel.value, spec1, g);
    w.trunk1_kernel.grad.add_scaled(cg.kernel, 1.0);
    return cg.input;
}

TargetMaps render_targets(const std::vector<OrientedBox>& gt, const GridConfig& cfg, int n_classes) {
    cfg.validate();
    const int n = cfg.grid_cells;
    TargetMaps t;
    t.heatmap = GridTensor({1, n_classes, n, n});
    t.offset = GridTensor({1, 2, n, n});
    t.size_log = GridTensor({1, 3, n, n});
    t.yaw_vec = GridTensor({1, 2, n, n});
    t.z_center = GridTensor({1, 1, n, n});
    t.mask = GridTensor({1, 1, n, n});

    for (const OrientedBox& box : gt) {
        if (box.class_id < 0 || box.class_id >= n_classes) {
            ++t.skipped;
            continue;
        }
        if (box.x < cfg.x_min || box.x >= cfg.x_max || box.y < cfg.y_min || box.y >= cfg.y_max ||
            box.z < cfg.z_min || box.z >= cfg.z_max) {
            ++t.skipped;
            continue;
        }
        const double fx = (box.x - cfg.x_min) / cfg.pillar_size;
        const double fy = (box.y - cfg.y_min) / cfg.pillar_size;
        const int col = static_cast<int>(std::floor(fx));
        const int row = static_cast<int>(std::floor(fy));

        const double radius = std::max(1.0, 0.5 * std::min(box.w, box.l) / cfg.pillar_size);
        const int r_int = static_cast<int>(std::floor(radius));
        const double sigma = (2.0 * r_int + 1.0) / 6.0;
        for (int dy = -r_int; dy <= r_int; ++dy)
            for (int dx = -r_int; dx <= r_int; ++dx) {
                const int yy = row + dy, xx = col + dx;
                if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
                const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                double& cell = t.heatmap.at(0, box.class_id, yy, xx);
                cell = std::max(cell, v);
            }
        t.heatmap.at(0, box.class_id, row, col) = 1.0;

        t.offset.at(0, 0, row, col) = fx - col;
        t.offset.at(0, 1, row, col) = fy - row;
        t.size_log.at(0, 0, row, col) = std::log(box.w);
        t.size_log.at(0, 1, row, col) = std::log(box.l);
        t.size_log.at(0, 2, row, col) = std::log(box.h);
        t.yaw_vec.at(0, 0, row, col) = std::sin(box.yaw);
        t.yaw_vec.at(0, 1, row, col) = std::cos(box.yaw);
        t.z_center.at(0, 0, row, col) = box.z;
        t.mask.at(0, 0, row, col) = 1.0;
    }
    return t;
}

TargetMaps stack_targets(const std::vector<TargetMaps>& per_scene) {
    if (per_scene.empty()) throw std::invalid_argument("stack_targets: empty batch");
    const int b_n = static_cast<int>(per_scene.size());
    const auto stack = [b_n, &per_scene](const GridTensor TargetMaps::*field) {
        std::vector<int> shape = (per_scene[0].*field).shape();
        shape[0] = b_n;
        GridTensor out(shape);
        const std::int64_t block = (per_scene[0].*field).numel();
        for (int b = 0; b < b_n; ++b) {
            const GridTensor& src = per_scene[static_cast<std::size_t>(b)].*field;
            if (src.numel() != block) throw std::invalid_argument("stack_targets: shape mismatch");
            std::copy(src.data(), src.data() + block, out.data() + static_cast<std::int64_t>(b) * block);
        }
        return out;
    };
    TargetMaps t;
    t.heatmap = stack(&TargetMaps::heatmap);
    t.offset = stack(&TargetMaps::offset);
    t.size_log = stack(&TargetMaps::size_log);
    t.yaw_vec = stack(&TargetMaps::yaw_vec);
    t.z_center = stack(&TargetMaps::z_center);
    t.mask = stack(&TargetMaps::mask);
    for (const TargetMaps& s : per_scene) t.skipped += s.skipped;
    return t;
}

namespace {

double masked_l1(const GridTensor& out, const GridTensor& tgt, const GridTensor& mask) {
    const int b_n = out.dim(0), c_n = out.dim(1);
    const std::int64_t pl = static_cast<std::int64_t>(out.dim(2)) * out.dim(3);
    double s = 0.0;
    for (int b = 0; b < b_n; ++b) {
        const double* mp = mask.data() + static_cast<std::int64_t>(b) * pl;
        for (int c = 0; c < c_n; ++c) {
            const double* op = out.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            const double* tp = tgt.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            for (std::int64_t i = 0; i < pl; ++i)
                if (mp[i] > 0.0) s += std::abs(op[i] - tp[i]);
        }
    }
    return s;
}

void masked_l1_grad(const GridTensor& out, const GridTensor& tgt, const GridTensor& mask, double scale,
                    GridTensor& grad) {
    const int b_n = out.dim(0), c_n = out.dim(1);
    const std::int64_t pl = static_cast<std::int64_t>(out.dim(2)) * out.dim(3);
    for (int b = 0; b < b_n; ++b) {
        const double* mp = mask.data() + static_cast<std::int64_t>(b) * pl;
        for (int c = 0; c < c_n; ++c) {
            const double* op = out.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            const double* tp = tgt.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            double* gp = grad.data() + (static_cast<std::int64_t>(b) * c_n + c) * pl;
            for (std::int64_t i = 0; i < pl; ++i) {
                if (mp[i] <= 0.0) continue;
                const double d = op[i] - tp[i];
                gp[i] = d > 0.0 ? scale : (d < 0.0 ? -scale : 0.0);
            }
        }
    }
}

constexpr double kRegressionWeight = 0.25;

}  // namespace

LossTerms detection_loss(const HeadOutput& out, const TargetMaps& tgt) {
    if (!out.heatmap.same_shape(tgt.heatmap)) throw std::invalid_argument("detection_loss: heatmap shape mismatch");
    LossTerms terms;

    int fg = 0;
    for (std::int64_t i = 0; i < tgt.mask.numel(); ++i)
        if (tgt.mask.data()[i] > 0.0) ++fg;
    terms.foreground = fg;
    const double norm = std::max(1, fg);

    double hm = 0.0;
    for (std::int64_t i = 0; i < out.heatmap.numel(); ++i) {
        const double p = std::clamp(out.heatmap.data()[i], kFocalClamp, 1.0 - kFocalClamp);
        const double t = tgt.heatmap.data()[i];
        if (t >= 1.0) {
            hm += -(1.0 - p) * (1.0 - p) * std::log(p);
        } else {
            const double pen = (1.0 - t) * (1.0 - t);
            hm += -pen * pen * p * p * std::log(1.0 - p);
        }
    }
    terms.heatmap = hm / norm;
    terms.offset = masked_l1(out.offset, tgt.offset, tgt.mask) / norm;
    terms.size = masked_l1(out.size_log, tgt.size_log, tgt.mask) / norm;
    terms.yaw = masked_l1(out.yaw_vec, tgt.yaw_vec, tgt.mask) / norm;
    terms.z = masked_l1(out.z_center, tgt.z_center, tgt.mask) / norm;
    terms.total = terms.heatmap + kRegressionWeight * (terms.offset + terms.size + terms.yaw + terms.z);
    return terms;
}

HeadOutputGrads detection_loss_backward(const HeadOutput& out, const TargetMaps& tgt) {
    HeadOutputGrads g;
    g.heatmap = GridTensor(out.heatmap.shape());
    g.offset = GridTensor(out.offset.shape());
    g.size_log = GridTensor(out.size_log.shape());
    g.yaw_vec = GridTensor(out.yaw_vec.shape());
    g.z_center = GridTensor(out.z_center.shape());

    int fg = 0;
    for (std::int64_t i = 0; i < tgt.mask.numel(); ++i)
        if (tgt.mask.data()[i] > 0.0) ++fg;
    const double norm = std::max(1, fg);

    for (std::int64_t i = 0; i < out.heatmap.numel(); ++i) {
        const double raw = out.heatmap.data()[i];
        if (raw < kFocalClamp || raw > 1.0 - kFocalClamp) {
            g.heatmap.data()[i] = 0.0;  // clamped region: flat
            continue;
        }
        const double p = raw;
        const double t = tgt.heatmap.data()[i];
        double d;
        if (t >= 1.0) {
            d = 2.0 * (1.0 - p) * std::log(p) - (1.0 - p) * (1.0 - p) / p;
        } else {
            const double pen = (1.0 - t) * (1.0 - t);
            d = -pen * pen * (2.0 * p * std::log(1.0 - p) - p * p / (1.0 - p));
        }
        g.heatmap.data()[i] = d / norm;
    }

    const double s = kRegressionWeight / norm;
    masked_l1_grad(out.offset, tgt.offset, tgt.mask, s, g.offset);
    masked_l1_grad(out.size_log, tgt.size_log, tgt.mask, s, g.size_log);
    masked_l1_grad(out.yaw_vec, tgt.yaw_vec, tgt.mask, s, g.yaw_vec);
    masked_l1_grad(out.z_center, tgt.z_center, tgt.mask, s, g.z_center);
    return g;
}

std::vector<OrientedBox> decode(const HeadOutput& out, const GridConfig& cfg, int max_dets, double score_thresh) {
    if (out.heatmap.dim(0) != 1) throw std::invalid_argument("decode: expected a single-scene output");
    const int n_classes = out.heatmap.dim(1);
    const int n = out.heatmap.dim(2);
    if (n != cfg.grid_cells) throw std::invalid_argument("decode: grid size mismatch");

    struct Peak {
        double score;
        int cls, row, col;
    };
    std::vector<Peak> peaks;
    for (int k = 0; k < n_classes; ++k)
        for (int row = 0; row < n; ++row)
            for (int col = 0; col < n; ++col) {
                const double p = out.heatmap.at(0, k, row, col);
                if (p < score_thresh) continue;
                bool is_peak = true;
                for (int dy = -1; dy <= 1 && is_peak; ++dy)
                    for (int dx = -1; dx <= 1 && is_peak; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const int yy = row + dy, xx = col + dx;
                        if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
                        if (out.heatmap.at(0, k, yy, xx) >= p) is_peak = false;
                    }
                if (is_peak) peaks.push_back({p, k, row, col});
            }

    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.cls != b.cls) return a.cls < b.cls;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    });
    if (static_cast<int>(peaks.size()) > max_dets) peaks.resize(static_cast<std::size_t>(max_dets));

    std::vector<OrientedBox> boxes;
    boxes.reserve(peaks.size());
    for (const Peak& pk : peaks) {
        OrientedBox b;
        b.x = cfg.x_min + (pk.col + out.offset.at(0, 0, pk.row, pk.col)) * cfg.pillar_size;
        b.y = cfg.y_min + (pk.row + out.offset.at(0, 1, pk.row, pk.col)) * cfg.pillar_size;
        b.z = out.z_center.at(0, 0, pk.row, pk.col);
        b.w = std::exp(out.size_log.at(0, 0, pk.row, pk.col));
        b.l = std::exp(out.size_log.at(0, 1, pk.row, pk.col));
        b.h = std::exp(out.size_log.at(0, 2, pk.row, pk.col));
        b.yaw = wrap_angle(std::atan2(out.yaw_vec.at(0, 0, pk.row, pk.col), out.yaw_vec.at(0, 1, pk.row, pk.col)));
        b.class_id = pk.cls;
        b.score = pk.score;
        boxes.push_back(b);
    }
    return boxes;
}

}  // namespace eqdet
