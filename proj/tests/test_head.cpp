#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "eqdet/audit.hpp"
#include "eqdet/head.hpp"
#include "eqdet/rng.hpp"
#include "testutil.hpp"

using namespace eqdet;
using namespace testutil;

namespace {

GridConfig head_grid() {
    GridConfig cfg;
    cfg.x_min = cfg.y_min = -4.0;
    cfg.x_max = cfg.y_max = 4.0;
    cfg.pillar_size = 0.5;
    cfg.grid_cells = 16;
    return cfg;
}

HeadWeights random_head(int in_channels, bool plain, std::uint64_t seed) {
    HeadConfig cfg;
    cfg.n_classes = 3;
    cfg.trunk_channels = 4;
    cfg.vector_hidden = 4;
    cfg.plain = plain;
    HeadWeights w(cfg, in_channels);
    CounterRng rng(seed);
    w.init(rng);
    return w;
}

double focal_oracle(const GridTensor& p_map, const GridTensor& t_map, int fg) {
    double s = 0.0;
    for (std::int64_t i = 0; i < p_map.numel(); ++i) {
        const double p = std::clamp(p_map.data()[i], 1e-6, 1.0 - 1e-6);
        const double t = t_map.data()[i];
        if (t >= 1.0)
            s += -std::pow(1.0 - p, 2.0) * std::log(p);
        else
            s += -std::pow(1.0 - t, 4.0) * std::pow(p, 2.0) * std::log(1.0 - p);
    }
    return s / std::max(1, fg);
}

}  // namespace

TEST_CASE("head_forward keeps the spatial extent and saturates at 0.5 with zero weights") {
    HeadConfig cfg;
    cfg.trunk_channels = 4;
    cfg.vector_hidden = 4;
    HeadWeights zero(cfg, 5);  // construction leaves every parameter at zero
    GridTensor x({1, 5, 8, 8});
    auto out = head_forward(x, zero);
    CHECK(out.heatmap.shape() == std::vector<int>{1, 3, 8, 8});
    CHECK(out.offset.shape() == std::vector<int>{1, 2, 8, 8});
    CHECK(out.size_log.shape() == std::vector<int>{1, 3, 8, 8});
    CHECK(out.yaw_vec.shape() == std::vector<int>{1, 2, 8, 8});
    CHECK(out.z_center.shape() == std::vector<int>{1, 1, 8, 8});
    for (double v : out.heatmap.values()) CHECK(v == 0.5);
    for (double v : out.offset.values()) CHECK(v == 0.5);  // cell-center fallback
}

TEST_CASE("head outputs transform covariantly under quarter turns") {
    auto w = random_head(5, false, 91);
    CounterRng rng(92);
    GridTensor x = random_tensor(rng, {1, 5, 8, 8});
    auto base = head_forward(x, w);

    for (int r = 1; r < 4; ++r) {
        const RotationC4 g((kQuarterTurnCcw.r * r) % 4);  // r world quarter turns
        auto rot = head_forward(rotate_planar(x, g), w);
        CHECK(rel_residual(rot.heatmap, rotate_planar(base.heatmap, g)) <= 1e-12);
        CHECK(rel_residual(rot.size_log, rotate_planar(base.size_log, g)) <= 1e-12);
        CHECK(rel_residual(rot.z_center, rotate_planar(base.z_center, g)) <= 1e-12);
        CHECK(rel_residual(rot.offset, expected_rotated_offset(base.offset, r)) <= 1e-12);
        CHECK(rel_residual(rot.yaw_vec, expected_rotated_yaw_vec(base.yaw_vec, r)) <= 1e-12);
    }

    auto plain = random_head(5, true, 93);
    auto pb = head_forward(x, plain);
    auto pr = head_forward(rotate_planar(x, RotationC4(1)), plain);
    CHECK(rel_residual(pr.heatmap, rotate_planar(pb.heatmap, RotationC4(1))) > 1e-3);
}

TEST_CASE("render_targets writes unit peaks, fractional offsets, and max-combined splats") {
    const GridConfig cfg = head_grid();

    OrientedBox on_center;
    on_center.x = cfg.cell_center_x(9);
    on_center.y = cfg.cell_center_y(5);
    on_center.z = 0.8;
    on_center.w = 1.9;
    on_center.l = 4.5;
    on_center.h = 1.6;
    on_center.yaw = 0.7;
    on_center.class_id = 0;
    auto t = render_targets({on_center}, cfg, 3);
    CHECK(t.heatmap.at(0, 0, 5, 9) == 1.0);
    CHECK(t.offset.at(0, 0, 5, 9) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(t.offset.at(0, 1, 5, 9) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(t.size_log.at(0, 1, 5, 9) == doctest::Approx(std::log(4.5)).epsilon(1e-12));
    CHECK(t.yaw_vec.at(0, 0, 5, 9) == doctest::Approx(std::sin(0.7)).epsilon(1e-12));
    CHECK(t.z_center.at(0, 0, 5, 9) == 0.8);
    CHECK(t.mask.at(0, 0, 5, 9) == 1.0);
    CHECK(t.skipped == 0);

    OrientedBox far = on_center;
    far.x = cfg.cell_center_x(2);
    far.y = cfg.cell_center_y(12);
    auto two = render_targets({on_center, far}, cfg, 3);
    int unit_peaks = 0;
    for (double v : two.heatmap.values()) unit_peaks += v == 1.0 ? 1 : 0;
    CHECK(unit_peaks == 2);

    OrientedBox bad_class = on_center;
    bad_class.class_id = 7;
    OrientedBox outside = on_center;
    outside.x = cfg.x_max + 1.0;
    CHECK(render_targets({bad_class, outside}, cfg, 3).skipped == 2);
}

TEST_CASE("overlapping splats equal the per-cell max over boxes") {
    const GridConfig cfg = head_grid();
    CounterRng rng(94);
    std::vector<OrientedBox> boxes;
    for (int i = 0; i < 4; ++i) {
        OrientedBox b;
        b.x = rng.uniform(-2.0, 2.0);
        b.y = rng.uniform(-2.0, 2.0);
        b.z = 0.5;
        b.w = rng.uniform(0.6, 2.5);
        b.l = rng.uniform(0.6, 2.5);
        b.h = 1.0;
        b.class_id = 0;
        boxes.push_back(b);
    }
    auto t = render_targets(boxes, cfg, 1);

    const int n = cfg.grid_cells;
    GridTensor want({1, 1, n, n});
    for (const auto& b : boxes) {
        const double fx = (b.x - cfg.x_min) / cfg.pillar_size;
        const double fy = (b.y - cfg.y_min) / cfg.pillar_size;
        const int col = static_cast<int>(std::floor(fx)), row = static_cast<int>(std::floor(fy));
        const int r_int = static_cast<int>(std::floor(std::max(1.0, 0.5 * std::min(b.w, b.l) / cfg.pillar_size)));
        const double sigma = (2.0 * r_int + 1.0) / 6.0;
        for (int dy = -r_int; dy <= r_int; ++dy)
            for (int dx = -r_int; dx <= r_int; ++dx) {
                const int yy = row + dy, xx = col + dx;
                if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
                double& cell = want.at(0, 0, yy, xx);
                cell = std::max(cell, std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma)));
            }
    }
    for (const auto& b : boxes) {
        const int col = static_cast<int>(std::floor((b.x - cfg.x_min) / cfg.pillar_size));
        const int row = static_cast<int>(std::floor((b.y - cfg.y_min) / cfg.pillar_size));
        want.at(0, 0, row, col) = 1.0;
    }
    CHECK(max_abs_diff(t.heatmap, want) == 0.0);
}

TEST_CASE("detection_loss matches the formula oracle") {
    const GridConfig cfg = head_grid();
    CounterRng rng(95);
    std::vector<OrientedBox> gt;
    for (int i = 0; i < 3; ++i) {
        OrientedBox b;
        b.x = rng.uniform(-3.0, 3.0);
        b.y = rng.uniform(-3.0, 3.0);
        b.z = rng.uniform(0.2, 1.0);
        b.w = rng.uniform(0.6, 2.0);
        b.l = rng.uniform(0.6, 4.0);
        b.h = rng.uniform(0.8, 1.8);
        b.yaw = rng.uniform(-M_PI, M_PI);
        b.class_id = i;
        gt.push_back(b);
    }
    auto t = render_targets(gt, cfg, 3);

    HeadOutput out;
    out.heatmap = GridTensor({1, 3, 16, 16});
    for (double& v : out.heatmap.values()) v = rng.uniform(0.05, 0.95);
    out.offset = random_tensor(rng, {1, 2, 16, 16});
    out.size_log = random_tensor(rng, {1, 3, 16, 16});
    out.yaw_vec = random_tensor(rng, {1, 2, 16, 16});
    out.z_center = random_tensor(rng, {1, 1, 16, 16});

    auto terms = detection_loss(out, t);
    CHECK(terms.foreground == 3);
    CHECK(std::fabs(terms.heatmap - focal_oracle(out.heatmap, t.heatmap, 3)) <= 1e-10);

    double l1 = 0.0;
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c)
            if (t.mask.at(0, 0, r, c) > 0.0)
                for (int ch = 0; ch < 2; ++ch) l1 += std::fabs(out.offset.at(0, ch, r, c) - t.offset.at(0, ch, r, c));
    CHECK(std::fabs(terms.offset - l1 / 3.0) <= 1e-10);
    CHECK(std::fabs(terms.total - (terms.heatmap + 0.25 * (terms.offset + terms.size + terms.yaw + terms.z))) <= 1e-12);

    // doubling a regression residual doubles that term
    HeadOutput doubled = out;
    for (std::int64_t i = 0; i < doubled.z_center.numel(); ++i) {
        const double tz = t.z_center.data()[i];
        doubled.z_center.data()[i] = tz + 2.0 * (out.z_center.data()[i] - tz);
    }
    CHECK(detection_loss(doubled, t).z == doctest::Approx(2.0 * terms.z).epsilon(1e-12));

    // near-perfect prediction drives the loss to zero: saturated peaks, zero
    // elsewhere (the penumbra weights only damp the background term)
    HeadOutput perfect;
    perfect.heatmap = t.heatmap;
    for (double& v : perfect.heatmap.values()) v = v == 1.0 ? 1.0 - 1e-9 : 1e-9;
    perfect.offset = t.offset;
    perfect.size_log = t.size_log;
    perfect.yaw_vec = t.yaw_vec;
    perfect.z_center = t.z_center;
    CHECK(detection_loss(perfect, t).total < 1e-3);
}

TEST_CASE("detection_loss backward passes the gradient check") {
    const GridConfig cfg = head_grid();
    CounterRng rng(96);
    OrientedBox b;
    b.x = 0.2;
    b.y = -1.3;
    b.z = 0.5;
    b.class_id = 1;
    auto t = render_targets({b}, cfg, 3);

    Param hm("hm", {1, 3, 16, 16});
    for (double& v : hm.value.values()) v = rng.uniform(0.1, 0.9);
    Param off("off", {1, 2, 16, 16}), sz("sz", {1, 3, 16, 16}), yv("yv", {1, 2, 16, 16}), zc("zc", {1, 1, 16, 16});
    off.init_normal(rng, 1.0);
    sz.init_normal(rng, 1.0);
    yv.init_normal(rng, 1.0);
    zc.init_normal(rng, 1.0);

    auto pack = [&] {
        HeadOutput out;
        out.heatmap = hm.value;
        out.offset = off.value;
        out.size_log = sz.value;
        out.yaw_vec = yv.value;
        out.z_center = zc.value;
        return out;
    };
    ParamRefs params{&hm, &off, &sz, &yv, &zc};
    auto rep = check_params(
        params, [&] { return detection_loss(pack(), t).total; },
        [&] {
            const auto g = detection_loss_backward(pack(), t);
            hm.grad.add_scaled(g.heatmap, 1.0);
            off.grad.add_scaled(g.offset, 1.0);
            sz.grad.add_scaled(g.size_log, 1.0);
            yv.grad.add_scaled(g.yaw_vec, 1.0);
            zc.grad.add_scaled(g.z_center, 1.0);
        });
    CHECK(rep.passed);
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("head parameters pass the gradient check") {
    CounterRng rng(97);
    GridTensor x = random_tensor(rng, {1, 4, 8, 8});
    for (const bool plain : {false, true}) {
        auto w = random_head(4, plain, 98 + static_cast<std::uint64_t>(plain));
        ParamRefs params;
        w.collect(params);

        const auto ro_hm = random_readout(1 * 3 * 8 * 8, 101);
        const auto ro_off = random_readout(1 * 2 * 8 * 8, 102);
        const auto ro_yaw = random_readout(1 * 2 * 8 * 8, 103);
        auto scalarize = [&](const HeadOutput& out) {
            return contract(out.heatmap, ro_hm) + contract(out.offset, ro_off) + contract(out.yaw_vec, ro_yaw);
        };
        auto rep = check_params(
            params, [&] { return scalarize(head_forward(x, w)); },
            [&] {
                HeadTape tape;
                head_forward(x, w, &tape);
                HeadOutputGrads g;
                g.heatmap = tensor_of({1, 3, 8, 8}, ro_hm);
                g.offset = tensor_of({1, 2, 8, 8}, ro_off);
                g.size_log = GridTensor({1, 3, 8, 8});
                g.yaw_vec = tensor_of({1, 2, 8, 8}, ro_yaw);
                g.z_center = GridTensor({1, 1, 8, 8});
                head_backward(tape, w, g);
            });
        CHECK(rep.passed);
        CHECK(rep.max_rel_err <= 1e-4);
    }
}

TEST_CASE("decode recovers a hand-built peak exactly") {
    const GridConfig cfg = head_grid();
    HeadOutput out;
    out.heatmap = GridTensor::full({1, 3, 16, 16}, 0.1);
    out.offset = GridTensor({1, 2, 16, 16});
    out.size_log = GridTensor({1, 3, 16, 16});
    out.yaw_vec = GridTensor({1, 2, 16, 16});
    out.z_center = GridTensor({1, 1, 16, 16});

    out.heatmap.at(0, 1, 5, 9) = 0.9;
    out.offset.at(0, 0, 5, 9) = 0.3;
    out.offset.at(0, 1, 5, 9) = 0.6;
    out.size_log.at(0, 0, 5, 9) = std::log(1.9);
    out.size_log.at(0, 1, 5, 9) = std::log(4.5);
    out.size_log.at(0, 2, 5, 9) = std::log(1.6);
    out.yaw_vec.at(0, 0, 5, 9) = std::sin(0.7);
    out.yaw_vec.at(0, 1, 5, 9) = std::cos(0.7);
    out.z_center.at(0, 0, 5, 9) = 0.8;

    auto boxes = decode(out, cfg, 20, 0.25);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].x == doctest::Approx(-4.0 + 9.3 * 0.5).epsilon(1e-12));
    CHECK(boxes[0].y == doctest::Approx(-4.0 + 5.6 * 0.5).epsilon(1e-12));
    CHECK(boxes[0].z == 0.8);
    CHECK(boxes[0].w == doctest::Approx(1.9).epsilon(1e-12));
    CHECK(boxes[0].l == doctest::Approx(4.5).epsilon(1e-12));
    CHECK(boxes[0].h == doctest::Approx(1.6).epsilon(1e-12));
    CHECK(boxes[0].yaw == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(boxes[0].class_id == 1);
    CHECK(boxes[0].score == 0.9);

    SUBCASE("uniform heatmap below threshold decodes to nothing") {
        HeadOutput flat = out;
        flat.heatmap = GridTensor::full({1, 3, 16, 16}, 0.2);
        CHECK(decode(flat, cfg, 20, 0.25).empty());
    }

    SUBCASE("max_dets keeps the highest scores") {
        out.heatmap.at(0, 0, 2, 2) = 0.95;
        out.heatmap.at(0, 2, 12, 12) = 0.8;
        auto top2 = decode(out, cfg, 2, 0.25);
        REQUIRE(top2.size() == 2);
        CHECK(top2[0].score == 0.95);
        CHECK(top2[1].score == 0.9);
    }

    SUBCASE("yaw decoding is plain atan2") {
        out.yaw_vec.at(0, 0, 5, 9) = 0.0;
        out.yaw_vec.at(0, 1, 5, 9) = 1.0;
        CHECK(decode(out, cfg, 20, 0.25)[0].yaw == 0.0);
        out.yaw_vec.at(0, 0, 5, 9) = 1.0;
        out.yaw_vec.at(0, 1, 5, 9) = 0.0;
        CHECK(decode(out, cfg, 20, 0.25)[0].yaw == doctest::Approx(M_PI / 2).epsilon(1e-15));
    }
}

TEST_CASE("rendered targets decode back to the ground truth") {
    const GridConfig cfg = head_grid();
    std::vector<OrientedBox> gt;
    const double xs[] = {-2.6, 0.4, 2.3};
    const double cls_sizes[][3] = {{1.9, 4.5, 1.6}, {0.6, 0.6, 1.7}, {0.6, 1.8, 1.4}};
    for (int i = 0; i < 3; ++i) {
        OrientedBox b;
        b.x = xs[i];
        b.y = xs[2 - i] + 0.17;
        b.z = 0.4 + 0.2 * i;
        b.w = cls_sizes[i][0];
        b.l = cls_sizes[i][1];
        b.h = cls_sizes[i][2];
        b.yaw = -2.0 + 1.3 * i;
        b.class_id = i;
        gt.push_back(b);
    }
    auto t = render_targets(gt, cfg, 3);
    REQUIRE(t.skipped == 0);

    HeadOutput out;
    out.heatmap = t.heatmap;
    out.offset = t.offset;
    out.size_log = t.size_log;
    out.yaw_vec = t.yaw_vec;
    out.z_center = t.z_center;
    auto boxes = decode(out, cfg, 20, 0.99);
    REQUIRE(boxes.size() == 3);
    for (const auto& b : boxes) {
        const auto& g = gt[static_cast<std::size_t>(b.class_id)];
        CHECK(std::hypot(b.x - g.x, b.y - g.y) < cfg.pillar_size);
        CHECK(std::fabs(b.w - g.w) <= 1e-6 * g.w);
        CHECK(std::fabs(b.l - g.l) <= 1e-6 * g.l);
        CHECK(std::fabs(b.h - g.h) <= 1e-6 * g.h);
        CHECK(std::fabs(wrap_angle(b.yaw - g.yaw)) < 1e-6);
        CHECK(b.z == doctest::Approx(g.z).epsilon(1e-12));
    }
}

TEST_CASE("stack_targets concatenates scenes along the batch axis") {
    const GridConfig cfg = head_grid();
    OrientedBox a;
    a.x = 1.0;
    a.y = 1.0;
    a.z = 0.5;
    OrientedBox b = a;
    b.x = -2.0;
    b.class_id = 2;
    auto t0 = render_targets({a}, cfg, 3);
    auto t1 = render_targets({b}, cfg, 3);
    auto stacked = stack_targets({t0, t1});
    CHECK(stacked.heatmap.shape() == std::vector<int>{2, 3, 16, 16});
    double diff = 0.0;
    for (int k = 0; k < 3; ++k)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                diff = std::max(diff, std::fabs(stacked.heatmap.at(0, k, y, x) - t0.heatmap.at(0, k, y, x)));
                diff = std::max(diff, std::fabs(stacked.heatmap.at(1, k, y, x) - t1.heatmap.at(0, k, y, x)));
            }
    CHECK(diff == 0.0);
    CHECK(stacked.mask.at(1, 0, static_cast<int>(std::floor((b.y + 4.0) / 0.5)), static_cast<int>(std::floor((b.x + 4.0) / 0.5))) == 1.0);
}
