#include "eqdet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace eqdet {

const std::vector<ClassPreset>& class_presets() {
    static const std::vector<ClassPreset> presets{
        {"car", 1.9, 4.5, 1.6, 0.8},
        {"pedestrian", 0.6, 0.6, 1.7, 0.4},
        {"cyclist", 0.6, 1.8, 1.4, 0.6},
    };
    return presets;
}

void SceneSpec::validate() const {
    if (min_boxes < 0 || max_boxes < min_boxes) throw std::invalid_argument("SceneSpec: bad box count range");
    if (class_weights.empty() || class_weights.size() > class_presets().size())
        throw std::invalid_argument("SceneSpec: class weights must cover 1..3 classes");
    double total = 0.0;
    for (double w : class_weights) {
        if (w < 0.0) throw std::invalid_argument("SceneSpec: negative class weight");
        total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("SceneSpec: class weights sum to zero");
    if (size_jitter < 0.0 || size_jitter >= 1.0) throw std::invalid_argument("SceneSpec: size jitter out of range");
    if (point_density < 0.0 || clutter_density < 0.0) throw std::invalid_argument("SceneSpec: negative density");
    if (noise_sigma < 0.0) throw std::invalid_argument("SceneSpec: negative noise sigma");
    if (center_margin <= 0.0 || center_margin >= 1.0)
        throw std::invalid_argument("SceneSpec: center margin must lie in (0,1)");
    if (min_gap < 0.0) throw std::invalid_argument("SceneSpec: negative box gap");
}

namespace {

constexpr double kPi = std::numbers::pi;

int sample_class(CounterRng& rng, const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double pick = rng.uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        pick -= weights[i];
        if (pick < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

double circumradius(const OrientedBox& b) { return 0.5 * std::hypot(b.w, b.l); }

void sample_box_surface(CounterRng& rng, const OrientedBox& box, double reflectance, const SceneSpec& spec,
                        PointCloud& cloud) {
    const double w = box.w, l = box.l, h = box.h;
    // 4 vertical faces + top, picked area-proportionally
    const double areas[5] = {l * h, l * h, w * h, w * h, w * l};
    double total = 0.0;
    for (double a : areas) total += a;

    const int count = std::max<int>(5, static_cast<int>(std::llround(spec.point_density * total)));
    const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    const double z_base = box.z - 0.5 * h;

    for (int i = 0; i < count; ++i) {
        double pick = rng.uniform() * total;
        int face = 0;
        while (face < 4 && pick >= areas[face]) {
            pick -= areas[face];
            ++face;
        }
        const double u = rng.uniform(), v = rng.uniform();
        double bx = 0.0, by = 0.0, bz = 0.0;
        switch (face) {
            case 0: bx = (u - 0.5) * l, by = 0.5 * w, bz = v * h; break;
            case 1: bx = (u - 0.5) * l, by = -0.5 * w, bz = v * h; break;
            case 2: bx = 0.5 * l, by = (u - 0.5) * w, bz = v * h; break;
            case 3: bx = -0.5 * l, by = (u - 0.5) * w, bz = v * h; break;
            default: bx = (u - 0.5) * l, by = (v - 0.5) * w, bz = h; break;
        }
        Point p;
        p.x = box.x + cy * bx - sy * by + spec.noise_sigma * rng.normal();
        p.y = box.y + sy * bx + cy * by + spec.noise_sigma * rng.normal();
        p.z = z_base + bz + spec.noise_sigma * rng.normal();
        p.intensity = std::clamp(reflectance + 0.05 * rng.normal(), 0.0, 1.0);
        cloud.push_back(p);
    }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, const GridConfig& cfg) {
    spec.validate();
    cfg.validate();
    CounterRng rng(spec.seed);
    Scene scene;

    const double cx = cfg.center_x(), cy = cfg.center_y();
    const double half = 0.5 * std::min(cfg.x_max - cfg.x_min, cfg.y_max - cfg.y_min);
    const double r_max = spec.center_margin * half;
    const auto& presets = class_presets();

    const int n_boxes = spec.max_boxes == spec.min_boxes ? spec.min_boxes
                                                         : rng.uniform_int(spec.min_boxes, spec.max_boxes);
    int attempts = 0;
    for (int i = 0; i < n_boxes; ++i) {
        for (;;) {
            if (++attempts > 10000) throw std::runtime_error("generate_scene: could not place disjoint boxes");
            const int cls = sample_class(rng, spec.class_weights);
            const ClassPreset& preset = presets[static_cast<std::size_t>(cls)];
            OrientedBox box;
            box.class_id = cls;
            box.w = preset.w * (1.0 + spec.size_jitter * rng.uniform(-1.0, 1.0));
            box.l = preset.l * (1.0 + spec.size_jitter * rng.uniform(-1.0, 1.0));
            box.h = preset.h * (1.0 + spec.size_jitter * rng.uniform(-1.0, 1.0));
            box.yaw = rng.uniform(-kPi, kPi);
            const double rr = r_max * std::sqrt(rng.uniform());
            const double th = rng.uniform(0.0, 2.0 * kPi);
            box.x = cx + rr * std::cos(th);
            box.y = cy + rr * std::sin(th);
            box.z = 0.5 * box.h;
            box.score = 1.0;

            bool clear = true;
            for (const OrientedBox& other : scene.gt) {
                const double d = std::hypot(box.x - other.x, box.y - other.y);
                if (d < circumradius(box) + circumradius(other) + spec.min_gap) {
                    clear = false;
                    break;
                }
            }
            if (clear) {
                scene.gt.push_back(box);
                break;
            }
        }
    }

    for (const OrientedBox& box : scene.gt)
        sample_box_surface(rng, box, presets[static_cast<std::size_t>(box.class_id)].reflectance, spec, scene.cloud);

    const double ground_area = (cfg.x_max - cfg.x_min) * (cfg.y_max - cfg.y_min);
    const int n_clutter = static_cast<int>(std::llround(spec.clutter_density * ground_area));
    for (int i = 0; i < n_clutter; ++i) {
        Point p;
        p.x = rng.uniform(cfg.x_min, cfg.x_max);
        p.y = rng.uniform(cfg.y_min, cfg.y_max);
        p.z = 0.02 * rng.normal();
        p.intensity = rng.uniform(0.0, 0.2);
        scene.cloud.push_back(p);
    }
    return scene;
}

Scene rotate_scene(const Scene& s, double angle, double pivot_x, double pivot_y) {
    const double c = std::cos(angle), sn = std::sin(angle);
    Scene out;
    out.cloud.reserve(s.cloud.size());
    for (const Point& p : s.cloud) {
        const double dx = p.x - pivot_x, dy = p.y - pivot_y;
        Point q = p;
        q.x = pivot_x + c * dx - sn * dy;
        q.y = pivot_y + sn * dx + c * dy;
        out.cloud.push_back(q);
    }
    out.gt.reserve(s.gt.size());
    for (const OrientedBox& b : s.gt) {
        OrientedBox r = b;
        const double dx = b.x - pivot_x, dy = b.y - pivot_y;
        r.x = pivot_x + c * dx - sn * dy;
        r.y = pivot_y + sn * dx + c * dy;
        r.yaw = wrap_angle(b.yaw + angle);
        out.gt.push_back(r);
    }
    return out;
}

}  // namespace eqdet
