#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "eqdet/group.hpp"
#include "eqdet/pillars.hpp"
#include "eqdet/rng.hpp"
#include "testutil.hpp"

using namespace eqdet;
using namespace testutil;

namespace {

GridConfig small_grid() {
    GridConfig cfg;
    cfg.x_min = cfg.y_min = -4.0;
    cfg.x_max = cfg.y_max = 4.0;
    cfg.pillar_size = 0.5;
    cfg.grid_cells = 16;
    return cfg;
}

EncoderWeights random_encoder(int hidden, int out_dim, std::uint64_t seed) {
    EncoderConfig cfg;
    cfg.hidden = hidden;
    cfg.rounds = 2;
    cfg.out_dim = out_dim;
    EncoderWeights w(cfg);
    CounterRng rng(seed);
    w.init(rng);
    return w;
}

// Rodrigues rotation about a unit axis.
Point rotate_about(const Point& p, const Point& pivot, const std::array<double, 3>& axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    const double vx = p.x - pivot.x, vy = p.y - pivot.y, vz = p.z - pivot.z;
    const double kx = axis[0], ky = axis[1], kz = axis[2];
    const double dot = kx * vx + ky * vy + kz * vz;
    const double cx = ky * vz - kz * vy, cy = kz * vx - kx * vz, cz = kx * vy - ky * vx;
    Point out = p;
    out.x = pivot.x + vx * c + cx * s + kx * dot * (1.0 - c);
    out.y = pivot.y + vy * c + cy * s + ky * dot * (1.0 - c);
    out.z = pivot.z + vz * c + cz * s + kz * dot * (1.0 - c);
    return out;
}

double rel_dev(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, mag = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::fabs(a[i] - b[i]));
        mag = std::max({mag, std::fabs(a[i]), std::fabs(b[i])});
    }
    return diff / std::max(mag, 1e-30);
}

}  // namespace

TEST_CASE("pillarize assigns points to half-open cells") {
    const GridConfig cfg = small_grid();

    PointCloud one{{cfg.cell_center_x(5), cfg.cell_center_y(3), 0.0, 0.5}};
    auto grid = pillarize(one, cfg);
    REQUIRE(grid.cells.size() == 1);
    CHECK(grid.cells.at({3, 5}) == std::vector<int>{0});
    CHECK(grid.offsets[0][0] == doctest::Approx(0.0).epsilon(1e-12));

    PointCloud edge{{cfg.x_max, 0.0, 0.0, 0.0}, {0.0, cfg.y_max, 0.0, 0.0}, {0.0, 0.0, cfg.z_max, 0.0}};
    auto dropped = pillarize(edge, cfg);
    CHECK(dropped.cells.empty());
    CHECK(dropped.dropped == 3);

    CounterRng rng(41);
    PointCloud cloud;
    for (int i = 0; i < 1000; ++i)
        cloud.push_back({rng.uniform(cfg.x_min, cfg.x_max - 1e-9), rng.uniform(cfg.y_min, cfg.y_max - 1e-9),
                         rng.uniform(cfg.z_min, cfg.z_max - 1e-9), rng.uniform()});
    auto big = pillarize(cloud, cfg, 1000000);
    std::map<CellKey, std::vector<int>> want;
    for (int i = 0; i < 1000; ++i) {
        const int col = static_cast<int>(std::floor((cloud[static_cast<std::size_t>(i)].x - cfg.x_min) / cfg.pillar_size));
        const int row = static_cast<int>(std::floor((cloud[static_cast<std::size_t>(i)].y - cfg.y_min) / cfg.pillar_size));
        want[{row, col}].push_back(i);
    }
    CHECK(big.cells == want);
    CHECK(big.dropped == 0);
}

TEST_CASE("pillarize keeps the points nearest the pillar center when over the cap") {
    const GridConfig cfg = small_grid();
    const double cx = cfg.cell_center_x(8), cy = cfg.cell_center_y(8);
    PointCloud cloud;
    // index i sits at planar distance (20 - i) * 0.01, so the nearest 16 are indices 4..19
    for (int i = 0; i < 20; ++i) cloud.push_back({cx + (20 - i) * 0.01, cy, 0.0, 0.1});
    auto grid = pillarize(cloud, cfg, 16);
    REQUIRE(grid.cells.size() == 1);
    const auto& kept = grid.cells.begin()->second;
    REQUIRE(kept.size() == 16);
    for (int i = 0; i < 16; ++i) CHECK(kept[static_cast<std::size_t>(i)] == i + 4);
    CHECK(grid.truncated == 4);

    // distance ties break toward the lower index
    PointCloud tied;
    for (int i = 0; i < 3; ++i) tied.push_back({cx + 0.05, cy, 0.0, 0.0});
    auto tg = pillarize(tied, cfg, 2);
    CHECK(tg.cells.begin()->second == std::vector<int>{0, 1});
}

TEST_CASE("rbf_embed evaluates the Gaussian basis") {
    RBFSpec spec;
    spec.count = 6;
    spec.d_max = 3.0;
    spec.gamma = 2.0;

    auto at_c0 = rbf_embed(spec.center(0), spec);
    CHECK(at_c0[0] == 1.0);

    auto at_zero = rbf_embed(0.0, spec);
    CHECK(at_zero[0] == 1.0);
    for (int k = 1; k < spec.count; ++k) CHECK(at_zero[static_cast<std::size_t>(k)] < at_zero[static_cast<std::size_t>(k - 1)]);

    CounterRng rng(42);
    for (int t = 0; t < 20; ++t) {
        const double d = rng.uniform(0.0, 5.0);
        const auto v = rbf_embed(d, spec);
        for (int k = 0; k < spec.count; ++k) {
            const double delta = d - spec.center(k);
            CHECK(std::fabs(v[static_cast<std::size_t>(k)] - std::exp(-spec.gamma * delta * delta)) <= 1e-15);
        }
    }
    CHECK_THROWS_AS(rbf_embed(-0.1, spec), std::invalid_argument);
}

TEST_CASE("encode_pillar is invariant to rigid motion and point order") {
    const auto w = random_encoder(8, 6, 51);
    CounterRng rng(52);

    std::vector<Point> pts;
    for (int i = 0; i < 9; ++i)
        pts.push_back({rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-1.0, 1.0), rng.uniform()});
    const auto base = encode_pillar(pts, w);

    SUBCASE("rotation about an arbitrary axis") {
        std::array<double, 3> axis{0.3, -0.5, 0.81};
        const double norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
        for (double& a : axis) a /= norm;
        const Point pivot{0.05, -0.1, 0.2, 0.0};
        std::vector<Point> moved;
        for (const Point& p : pts) moved.push_back(rotate_about(p, pivot, axis, 37.0 * M_PI / 180.0));
        CHECK(rel_dev(encode_pillar(moved, w), base) <= 1e-6);
    }

    SUBCASE("translation") {
        std::vector<Point> moved = pts;
        for (Point& p : moved) {
            p.x += 3.7;
            p.y -= 1.2;
            p.z += 0.4;
        }
        CHECK(rel_dev(encode_pillar(moved, w), base) <= 1e-9);
    }

    SUBCASE("permutation is exact") {
        std::vector<Point> shuffled = pts;
        std::reverse(shuffled.begin(), shuffled.end());
        std::swap(shuffled[0], shuffled[4]);
        const auto out = encode_pillar(shuffled, w);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == base[i]);
    }
}

TEST_CASE("a lone point encodes to the position-independent default") {
    const auto w = random_encoder(8, 6, 53);
    std::vector<Point> a{{0.1, 0.2, -0.5, 0.3}};
    std::vector<Point> b{{-0.2, 0.05, 1.5, 0.3}};
    const auto fa = encode_pillar(a, w);
    const auto fb = encode_pillar(b, w);
    for (std::size_t i = 0; i < fa.size(); ++i) CHECK(fa[i] == fb[i]);
}

TEST_CASE("encode_pillar weights pass the gradient check") {
    EncoderConfig cfg;
    cfg.hidden = 4;
    cfg.rounds = 2;
    cfg.out_dim = 3;
    cfg.rbf.count = 4;
    EncoderWeights w(cfg);
    CounterRng rng(54);
    w.init(rng);

    std::vector<Point> pts;
    for (int i = 0; i < 5; ++i)
        pts.push_back({rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.5, 0.5), rng.uniform()});

    ParamRefs params;
    w.collect(params);
    const auto readout = random_readout(cfg.out_dim, 55);
    auto rep = check_params(
        params,
        [&] {
            const auto f = encode_pillar(pts, w);
            double s = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * readout[i];
            return s;
        },
        [&] {
            PillarTape tape;
            encode_pillar(pts, w, tape);
            encode_pillar_backward(tape, w, readout);
        });
    CHECK(rep.passed);
    CHECK(rep.max_rel_err <= 1e-4);

    // the single-point path trains the default vector
    std::vector<Point> lone{{0.0, 0.0, 0.0, 0.5}};
    auto lone_rep = check_params(
        params,
        [&] {
            const auto f = encode_pillar(lone, w);
            double s = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * readout[i];
            return s;
        },
        [&] {
            PillarTape tape;
            encode_pillar(lone, w, tape);
            encode_pillar_backward(tape, w, readout);
        });
    CHECK(lone_rep.passed);
}

TEST_CASE("scatter_to_bev places features at occupied cells only") {
    const GridConfig cfg = small_grid();
    PillarGrid empty_grid;
    empty_grid.rows = empty_grid.cols = cfg.grid_cells;
    auto zero = scatter_to_bev({}, empty_grid, cfg, 4);
    CHECK(zero.shape() == std::vector<int>{1, 4, 16, 16});
    CHECK(zero.sum_squares() == 0.0);

    CounterRng rng(61);
    PointCloud cloud;
    for (int i = 0; i < 200; ++i)
        cloud.push_back({rng.uniform(cfg.x_min, cfg.x_max - 1e-9), rng.uniform(cfg.y_min, cfg.y_max - 1e-9), 0.0, 0.5});
    auto grid = pillarize(cloud, cfg);
    std::map<CellKey, std::vector<double>> feats;
    for (const auto& [key, idx] : grid.cells) feats[key] = {1.0 + key.first, 2.0 + key.second, 3.0};
    auto bev = scatter_to_bev(feats, grid, cfg, 3);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) {
            const bool occ = grid.cells.count({r, c}) > 0;
            CHECK((bev.at(0, 0, r, c) != 0.0) == occ);
            if (occ) CHECK(bev.at(0, 1, r, c) == 2.0 + c);
        }

    feats.erase(feats.begin()->first);
    CHECK_THROWS_AS(scatter_to_bev(feats, grid, cfg, 3), std::invalid_argument);
}

TEST_CASE("a quarter-turned cloud encodes to the quarter-turned BEV map") {
    const GridConfig cfg = small_grid();
    const auto w = random_encoder(6, 5, 62);
    CounterRng rng(63);

    PointCloud cloud;
    for (int i = 0; i < 300; ++i) {
        // keep points off cell boundaries so rotation never flips a cell assignment
        const int col = rng.uniform_int(1, cfg.grid_cells - 2);
        const int row = rng.uniform_int(1, cfg.grid_cells - 2);
        cloud.push_back({cfg.cell_center_x(col) + rng.uniform(-0.2, 0.2), cfg.cell_center_y(row) + rng.uniform(-0.2, 0.2),
                         rng.uniform(-1.0, 1.0), rng.uniform()});
    }

    PointCloud turned;
    const double cx = cfg.center_x(), cy = cfg.center_y();
    for (const Point& p : cloud) {
        Point q = p;
        q.x = cx - (p.y - cy);
        q.y = cy + (p.x - cx);
        turned.push_back(q);
    }

    const auto base = encode_cloud(cloud, w, cfg);
    const auto rot = encode_cloud(turned, w, cfg);
    CHECK(rel_residual(rot.bev, rotate_planar(base.bev, kQuarterTurnCcw)) <= 1e-6);
}
