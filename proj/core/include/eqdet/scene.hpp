#pragma once

#include <cstdint>
#include <vector>

#include "eqdet/head.hpp"
#include "eqdet/pillars.hpp"
#include "eqdet/rng.hpp"

namespace eqdet {

struct ClassPreset {
    const char* name;
    double w, l, h;        // base extents, meters
    double reflectance;    // base point intensity
};

/// car-like, pedestrian-like, cyclist-like
const std::vector<ClassPreset>& class_presets();

struct SceneSpec {
    std::uint64_t seed = 0;
    int min_boxes = 3;
    int max_boxes = 8;
    std::vector<double> class_weights{1.0, 1.0, 1.0};
    double size_jitter = 0.15;       // relative, per dimension
    double point_density = 60.0;     // points per m^2 of box surface
    double clutter_density = 0.5;    // points per m^2 of ground
    double noise_sigma = 0.02;       // coordinate noise, meters
    double center_margin = 0.66;     // centers stay within this fraction of the half-range
    double min_gap = 0.5;            // BEV clearance between box circumcircles, meters

    void validate() const;
};

struct Scene {
    PointCloud cloud;
    std::vector<OrientedBox> gt;
};

/// Deterministic synthetic scene: boxes rejection-sampled until their BEV
/// circumcircles are disjoint, surfaces point-sampled area-proportionally
/// (4 vertical faces + top, at least 5 points per box), plus ground clutter.
/// Throws after 10^4 placement attempts.
Scene generate_scene(const SceneSpec& spec, const GridConfig& cfg);

/// Rigid rotation of points and boxes about a pivot; z and sizes untouched,
/// yaw shifted and wrapped.
Scene rotate_scene(const Scene& s, double angle, double pivot_x, double pivot_y);

}  // namespace eqdet
