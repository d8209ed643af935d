#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "eqdet/scene.hpp"
#include "testutil.hpp"

using namespace eqdet;

namespace {

GridConfig scene_grid() {
    GridConfig cfg;
    cfg.pillar_size = 0.5;
    cfg.grid_cells = 32;
    return cfg;  // +-8 m default range
}

bool same_cloud(const PointCloud& a, const PointCloud& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].x != b[i].x || a[i].y != b[i].y || a[i].z != b[i].z || a[i].intensity != b[i].intensity) return false;
    return true;
}

}  // namespace

TEST_CASE("class presets carry the expected footprints") {
    const auto& presets = class_presets();
    REQUIRE(presets.size() == 3);
    CHECK(presets[0].l == 4.5);
    CHECK(presets[0].w == 1.9);
    CHECK(presets[1].h == 1.7);
    CHECK(presets[2].l == 1.8);
}

TEST_CASE("generate_scene is a pure function of the seed") {
    const GridConfig cfg = scene_grid();
    SceneSpec spec;
    spec.seed = 12345;
    auto a = generate_scene(spec, cfg);
    auto b = generate_scene(spec, cfg);
    CHECK(same_cloud(a.cloud, b.cloud));
    REQUIRE(a.gt.size() == b.gt.size());
    for (std::size_t i = 0; i < a.gt.size(); ++i) {
        CHECK(a.gt[i].x == b.gt[i].x);
        CHECK(a.gt[i].yaw == b.gt[i].yaw);
    }

    spec.seed = 12346;
    auto c = generate_scene(spec, cfg);
    CHECK_FALSE(same_cloud(a.cloud, c.cloud));
}

TEST_CASE("generated boxes respect the spec constraints") {
    const GridConfig cfg = scene_grid();
    SceneSpec spec;
    spec.seed = 77;
    spec.min_boxes = 3;
    spec.max_boxes = 6;
    spec.class_weights = {1.0, 0.0, 1.0};  // never a pedestrian
    const auto& presets = class_presets();

    for (std::uint64_t s = 0; s < 10; ++s) {
        spec.seed = 77 + s;
        auto scene = generate_scene(spec, cfg);
        CHECK(scene.gt.size() >= 3);
        CHECK(scene.gt.size() <= 6);
        for (const auto& b : scene.gt) {
            CHECK(b.class_id != 1);
            const auto& p = presets[static_cast<std::size_t>(b.class_id)];
            CHECK(b.w >= p.w * 0.849);
            CHECK(b.w <= p.w * 1.151);
            CHECK(b.l >= p.l * 0.849);
            CHECK(b.l <= p.l * 1.151);
            CHECK(b.z == 0.5 * b.h);
            CHECK(b.yaw >= -M_PI);
            CHECK(b.yaw < M_PI);
            CHECK(std::hypot(b.x, b.y) <= spec.center_margin * 8.0 + 1e-9);
        }
        for (std::size_t i = 0; i < scene.gt.size(); ++i)
            for (std::size_t j = i + 1; j < scene.gt.size(); ++j) {
                const auto& a = scene.gt[i];
                const auto& b = scene.gt[j];
                const double ra = 0.5 * std::hypot(a.w, a.l);
                const double rb = 0.5 * std::hypot(b.w, b.l);
                CHECK(std::hypot(a.x - b.x, a.y - b.y) >= ra + rb + spec.min_gap - 1e-9);
            }
    }
}

TEST_CASE("each box carries at least five nearby points") {
    const GridConfig cfg = scene_grid();
    SceneSpec spec;
    spec.seed = 99;
    spec.point_density = 10.0;
    spec.clutter_density = 0.0;
    auto scene = generate_scene(spec, cfg);
    REQUIRE(!scene.gt.empty());
    for (const auto& b : scene.gt) {
        const double reach = 0.5 * std::hypot(b.w, b.l) + 0.2;
        int nearby = 0;
        for (const auto& p : scene.cloud)
            if (std::hypot(p.x - b.x, p.y - b.y) <= reach) ++nearby;
        CHECK(nearby >= 5);
    }
}

TEST_CASE("an empty spec yields an empty cloud") {
    const GridConfig cfg = scene_grid();
    SceneSpec spec;
    spec.seed = 1;
    spec.min_boxes = spec.max_boxes = 0;
    spec.clutter_density = 0.0;
    auto scene = generate_scene(spec, cfg);
    CHECK(scene.cloud.empty());
    CHECK(scene.gt.empty());
}

TEST_CASE("placement gives up after the attempt budget") {
    const GridConfig cfg = scene_grid();
    SceneSpec spec;
    spec.seed = 5;
    spec.min_boxes = spec.max_boxes = 4;
    spec.min_gap = 100.0;
    CHECK_THROWS_AS(generate_scene(spec, cfg), std::runtime_error);
}

TEST_CASE("spec validation rejects bad fields") {
    SceneSpec spec;
    spec.class_weights = {};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec.class_weights = {0.0, 0.0, 0.0};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = SceneSpec{};
    spec.size_jitter = 1.0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = SceneSpec{};
    spec.point_density = -1.0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = SceneSpec{};
    spec.min_boxes = 5;
    spec.max_boxes = 2;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("rotate_scene is rigid on points and wraps yaw") {
    const GridConfig cfg = scene_grid();
    SceneSpec spec;
    spec.seed = 31;
    auto scene = generate_scene(spec, cfg);

    auto same = rotate_scene(scene, 0.0, 0.0, 0.0);
    CHECK(same_cloud(same.cloud, scene.cloud));

    auto spun = rotate_scene(scene, 1.1, 0.5, -0.25);
    REQUIRE(spun.cloud.size() == scene.cloud.size());
    for (std::size_t i = 1; i < scene.cloud.size(); i += 97) {
        const auto& a0 = scene.cloud[i - 1];
        const auto& b0 = scene.cloud[i];
        const auto& a1 = spun.cloud[i - 1];
        const auto& b1 = spun.cloud[i];
        const double d0 = std::hypot(a0.x - b0.x, a0.y - b0.y);
        const double d1 = std::hypot(a1.x - b1.x, a1.y - b1.y);
        CHECK(std::fabs(d0 - d1) <= 1e-12);
        CHECK(a0.z == a1.z);
        CHECK(a0.intensity == a1.intensity);
    }
    for (std::size_t i = 0; i < scene.gt.size(); ++i) {
        CHECK(std::fabs(wrap_angle(spun.gt[i].yaw - scene.gt[i].yaw - 1.1)) <= 1e-12);
        CHECK(spun.gt[i].w == scene.gt[i].w);
    }

    auto back = rotate_scene(rotate_scene(scene, M_PI, 0.0, 0.0), M_PI, 0.0, 0.0);
    for (std::size_t i = 0; i < scene.cloud.size(); i += 53) {
        CHECK(std::fabs(back.cloud[i].x - scene.cloud[i].x) <= 1e-12);
        CHECK(std::fabs(back.cloud[i].y - scene.cloud[i].y) <= 1e-12);
    }
}
