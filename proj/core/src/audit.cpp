#include "eqdet/audit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "eqdet/group.hpp"

namespace eqdet {

double max_abs_diff(const GridTensor& a, const GridTensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

BoxSetDiff compare_box_sets(const std::vector<OrientedBox>& a, const std::vector<OrientedBox>& b) {
    BoxSetDiff d;
    d.count_match = a.size() == b.size();
    std::vector<char> used(b.size(), 0);
    int matched = 0;
    for (const OrientedBox& box : a) {
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < b.size(); ++j) {
            if (used[j] || b[j].class_id != box.class_id) continue;
            const double dist = std::hypot(box.x - b[j].x, box.y - b[j].y);
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<int>(j);
            }
        }
        if (best < 0) {
            ++d.unmatched;
            continue;
        }
        used[static_cast<std::size_t>(best)] = 1;
        ++matched;
        d.center = std::max(d.center, best_d);
        d.yaw = std::max(d.yaw, orientation_error(box.yaw, b[static_cast<std::size_t>(best)].yaw));
        d.score = std::max(d.score, std::abs(box.score - b[static_cast<std::size_t>(best)].score));
    }
    d.unmatched += static_cast<int>(b.size()) - matched;
    return d;
}

namespace {

constexpr int kCos[4] = {1, 0, -1, 0};
constexpr int kSin[4] = {0, 1, 0, -1};

/// rotate_planar element matching r counter-clockwise world quarter turns
RotationC4 world_turns(int r) { return RotationC4(kQuarterTurnCcw.r * r); }

}  // namespace

std::vector<OrientedBox> rotate_boxes_quarter(const std::vector<OrientedBox>& boxes, int r, const GridConfig& cfg) {
    const int rr = ((r % 4) + 4) % 4;
    const double c = kCos[rr], s = kSin[rr];
    const double px = cfg.center_x(), py = cfg.center_y();
    std::vector<OrientedBox> out;
    out.reserve(boxes.size());
    for (const OrientedBox& b : boxes) {
        OrientedBox q = b;
        const double dx = b.x - px, dy = b.y - py;
        q.x = px + c * dx - s * dy;
        q.y = py + s * dx + c * dy;
        q.yaw = wrap_angle(b.yaw + rr * 0.5 * std::numbers::pi);
        out.push_back(q);
    }
    return out;
}

GridTensor expected_rotated_offset(const GridTensor& offset, int r) {
    const int rr = ((r % 4) + 4) % 4;
    const GridTensor a = rotate_planar(offset, world_turns(rr));
    const double c = kCos[rr], s = kSin[rr];
    const int b_n = a.dim(0), n = a.dim(3);
    const std::int64_t pl = static_cast<std::int64_t>(n) * a.dim(2);
    GridTensor out(a.shape());
    for (int b = 0; b < b_n; ++b) {
        const double* a0 = a.data() + static_cast<std::int64_t>(b) * 2 * pl;
        const double* a1 = a0 + pl;
        double* o0 = out.data() + static_cast<std::int64_t>(b) * 2 * pl;
        double* o1 = o0 + pl;
        for (std::int64_t i = 0; i < pl; ++i) {
            const double vx = a0[i] - 0.5, vy = a1[i] - 0.5;
            o0[i] = c * vx - s * vy + 0.5;
            o1[i] = s * vx + c * vy + 0.5;
        }
    }
    return out;
}

GridTensor expected_rotated_yaw_vec(const GridTensor& yaw_vec, int r) {
    const int rr = ((r % 4) + 4) % 4;
    const GridTensor a = rotate_planar(yaw_vec, world_turns(rr));
    const double c = kCos[rr], s = kSin[rr];
    const int b_n = a.dim(0), n = a.dim(3);
    const std::int64_t pl = static_cast<std::int64_t>(n) * a.dim(2);
    GridTensor out(a.shape());
    for (int b = 0; b < b_n; ++b) {
        const double* sin_p = a.data() + static_cast<std::int64_t>(b) * 2 * pl;
        const double* cos_p = sin_p + pl;
        double* so = out.data() + static_cast<std::int64_t>(b) * 2 * pl;
        double* co = so + pl;
        for (std::int64_t i = 0; i < pl; ++i) {
            const double ux = cos_p[i], uy = sin_p[i];
            co[i] = c * ux - s * uy;
            so[i] = s * ux + c * uy;
        }
    }
    return out;
}

namespace {

GridTensor random_tensor(CounterRng& rng, const std::vector<int>& shape) {
    GridTensor t(shape);
    for (double& v : t.values()) v = rng.normal();
    return t;
}

ConvSpec audit_block_spec(const BackboneWeights& w, int i) {
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
        default: throw std::logic_error("audit_block_spec: bad index");
    }
    return spec;
}

const char* kBlockNames[6] = {"lift", "stage1", "stage2", "stage3", "up2", "up3"};

}  // namespace

AuditReport audit_model(Model& m, std::uint64_t seed, double tolerance) {
    AuditReport rep;
    rep.tolerance = tolerance;
    const auto add = [&rep, tolerance](const std::string& name, int r, double res) {
        rep.layers.push_back({name, r, res});
        rep.worst_layer_residual = std::max(rep.worst_layer_residual, res);
        if (!(res <= tolerance)) rep.pass = false;
    };

    CounterRng rng(CounterRng::mix(seed ^ 0x41554449u));
    const bool plain = m.cfg.backbone.plain;
    const int n = 8;

    SceneSpec spec;
    spec.seed = seed;
    const Scene scene = generate_scene(spec, m.cfg.grid);
    const double px = m.cfg.grid.center_x(), py = m.cfg.grid.center_y();

    const CloudEncoding enc0 = encode_cloud(scene.cloud, m.encoder, m.cfg.grid);
    for (int r = 1; r <= 3; ++r) {
        const Scene sr = rotate_scene(scene, r * 0.5 * std::numbers::pi, px, py);
        const CloudEncoding encr = encode_cloud(sr.cloud, m.encoder, m.cfg.grid);
        add("encoder.bev", r, max_abs_diff(encr.bev, rotate_planar(enc0.bev, world_turns(r))));
    }

    for (int i = 0; i < 6; ++i) {
        const ConvSpec cs = audit_block_spec(m.backbone, i);
        const GridTensor& kernel = m.backbone.blocks[static_cast<std::size_t>(i)].kernel.value;
        const std::string name = std::string("backbone.") + kBlockNames[i] + ".conv";
        if (plain) {
            const GridTensor x = random_tensor(rng, {1, cs.in_channels, n, n});
            const GridTensor y =
                cs.transposed ? conv2d_transpose(x, kernel, cs) : conv2d(x, kernel, cs);
            for (int r = 1; r <= 3; ++r) {
                const RotationC4 g = world_turns(r);
                const GridTensor yr = cs.transposed ? conv2d_transpose(rotate_planar(x, g), kernel, cs)
                                                    : conv2d(rotate_planar(x, g), kernel, cs);
                add(name, r, max_abs_diff(yr, rotate_planar(y, g)));
            }
        } else if (i == 0) {
            const GridTensor x = random_tensor(rng, {1, cs.in_channels, n, n});
            const GridTensor y = lifting_conv(x, kernel, cs);
            for (int r = 1; r <= 3; ++r) {
                const RotationC4 g = world_turns(r);
                add(name, r, max_abs_diff(lifting_conv(rotate_planar(x, g), kernel, cs), rotate_p4(y, g)));
            }
        } else {
            const GridTensor x = random_tensor(rng, {1, cs.in_channels, 4, n, n});
            const GridTensor y = cs.transposed ? group_conv_transpose(x, kernel, cs) : group_conv(x, kernel, cs);
            for (int r = 1; r <= 3; ++r) {
                const RotationC4 g = world_turns(r);
                const GridTensor yr = cs.transposed ? group_conv_transpose(rotate_p4(x, g), kernel, cs)
                                                    : group_conv(rotate_p4(x, g), kernel, cs);
                add(name, r, max_abs_diff(yr, rotate_p4(y, g)));
            }
        }
    }

    {
        const GridTensor x = random_tensor(rng, {1, m.backbone.in_channels, n, n});
        const GridTensor y = backbone_forward(x, m.backbone, false);
        for (int r = 1; r <= 3; ++r) {
            const RotationC4 g = world_turns(r);
            add("backbone", r, max_abs_diff(backbone_forward(rotate_planar(x, g), m.backbone, false),
                                            rotate_planar(y, g)));
        }
    }

    if (!plain) {
        const GridTensor z = random_tensor(rng, {1, 3, 4, n, n});
        const GroupPoolMode mode = m.cfg.backbone.mean_pool ? GroupPoolMode::kMean : GroupPoolMode::kMax;
        const GridTensor p = group_pool(z, mode);
        const GridTensor ap = avg_pool2(z);
        const GridTensor up = unpool2(z);
        for (int r = 1; r <= 3; ++r) {
            const RotationC4 g = world_turns(r);
            add("group_pool", r, max_abs_diff(group_pool(rotate_p4(z, g), mode), rotate_planar(p, g)));
            add("avg_pool2", r, max_abs_diff(avg_pool2(rotate_p4(z, g)), rotate_p4(ap, g)));
            add("unpool2", r, max_abs_diff(unpool2(rotate_p4(z, g)), rotate_p4(up, g)));
        }
    }

    {
        const GridTensor feat = random_tensor(rng, {1, m.head.in_channels, n, n});
        const HeadOutput out0 = head_forward(feat, m.head);
        for (int r = 1; r <= 3; ++r) {
            const RotationC4 g = world_turns(r);
            const HeadOutput outr = head_forward(rotate_planar(feat, g), m.head);
            add("head.heatmap", r, max_abs_diff(outr.heatmap, rotate_planar(out0.heatmap, g)));
            add("head.size_log", r, max_abs_diff(outr.size_log, rotate_planar(out0.size_log, g)));
            add("head.z_center", r, max_abs_diff(outr.z_center, rotate_planar(out0.z_center, g)));
            add("head.offset", r, max_abs_diff(outr.offset, expected_rotated_offset(out0.offset, r)));
            add("head.yaw_vec", r, max_abs_diff(outr.yaw_vec, expected_rotated_yaw_vec(out0.yaw_vec, r)));
        }
    }

    const std::vector<OrientedBox> dets0 = detect_cloud(m, scene.cloud);
    for (int r = 1; r <= 3; ++r) {
        const Scene sr = rotate_scene(scene, r * 0.5 * std::numbers::pi, px, py);
        const std::vector<OrientedBox> detsr = detect_cloud(m, sr.cloud);
        const BoxSetDiff diff = compare_box_sets(detsr, rotate_boxes_quarter(dets0, r, m.cfg.grid));
        if (!diff.count_match || diff.unmatched > 0 || diff.center > 0.5 * m.cfg.grid.pillar_size ||
            diff.yaw > 1e-4 || diff.score > 1e-5)
            rep.pass = false;
        rep.end_to_end.push_back(diff);
    }
    return rep;
}

std::string audit_report_text(const AuditReport& report) {
    std::ostringstream out;
    char buf[160];
    out << "stage residuals (max abs difference, per quarter turn)\n";
    for (const LayerResidual& lr : report.layers) {
        std::snprintf(buf, sizeof(buf), "  %-24s r=%d  %.3e%s\n", lr.name.c_str(), lr.rotation, lr.residual,
                      lr.residual <= report.tolerance ? "" : "  EXCEEDS");
        out << buf;
    }
    out << "end-to-end detection comparison (rotated scene vs mapped boxes)\n";
    for (std::size_t i = 0; i < report.end_to_end.size(); ++i) {
        const BoxSetDiff& d = report.end_to_end[i];
        std::snprintf(buf, sizeof(buf),
                      "  r=%zu  count %s  unmatched %d  center %.3e m  yaw %.3e rad  score %.3e\n", i + 1,
                      d.count_match ? "ok" : "MISMATCH", d.unmatched, d.center, d.yaw, d.score);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "worst stage residual %.3e (tolerance %.1e)\n", report.worst_layer_residual,
                  report.tolerance);
    out << buf;
    out << (report.pass ? "AUDIT PASS\n" : "AUDIT FAIL\n");
    return out.str();
}

std::vector<SweepRow> heading_sweep(Model& m, const std::vector<Scene>& scenes, int n_headings) {
    if (n_headings < 1) throw std::invalid_argument("heading_sweep: need at least one heading");
    const double px = m.cfg.grid.center_x(), py = m.cfg.grid.center_y();
    EvalOptions opts;
    opts.ap_thresholds = {2.0};
    opts.tp_threshold = 2.0;

    std::vector<SweepRow> rows;
    rows.reserve(static_cast<std::size_t>(n_headings));
    for (int h = 0; h < n_headings; ++h) {
        const double angle = 2.0 * std::numbers::pi * h / n_headings;
        std::vector<std::vector<OrientedBox>> preds, gts;
        preds.reserve(scenes.size());
        gts.reserve(scenes.size());
        for (const Scene& s : scenes) {
            const Scene sr = rotate_scene(s, angle, px, py);
            preds.push_back(detect_cloud(m, sr.cloud));
            gts.push_back(sr.gt);
        }
        const EvalReport rep = evaluate(preds, gts, m.cfg.head.n_classes, opts);
        SweepRow row;
        row.heading_deg = 360.0 * h / n_headings;
        row.ap = rep.mean_ap;
        row.aoe = rep.mean_aoe;
        for (const ClassEval& ce : rep.classes)
            if (ce.tp.no_matches) row.no_matches = true;
        rows.push_back(row);
    }
    return rows;
}

std::string sweep_table_text(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "heading_deg   AP@2m     AOE\n";
    char buf[96];
    for (const SweepRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%11.1f  %6.4f  %6.4f%s\n", r.heading_deg, r.ap, r.aoe,
                      r.no_matches ? "  (no matches)" : "");
        out << buf;
    }
    return out.str();
}

double aoe_std(const std::vector<SweepRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("aoe_std: empty sweep");
    double mean = 0.0;
    for (const SweepRow& r : rows) mean += r.aoe;
    mean /= static_cast<double>(rows.size());
    double var = 0.0;
    for (const SweepRow& r : rows) var += (r.aoe - mean) * (r.aoe - mean);
    return std::sqrt(var / static_cast<double>(rows.size()));
}

}  // namespace eqdet
