#include <benchmark/benchmark.h>

#include <vector>

#include "eqdet/model.hpp"

using namespace eqdet;

namespace {

GridTensor random_tensor(CounterRng& rng, const std::vector<int>& shape, double scale = 1.0) {
    GridTensor t(shape);
    for (double& v : t.values()) v = rng.normal() * scale;
    return t;
}

void bm_conv2d(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(1));
    const int n = static_cast<int>(state.range(0));
    ConvSpec spec;
    spec.in_channels = 32;
    spec.out_channels = 32;
    spec.kernel_size = 3;
    spec.padding = 1;
    const GridTensor x = random_tensor(rng, {1, 32, n, n});
    const GridTensor k = random_tensor(rng, {32, 32, 3, 3}, 0.1);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, spec));
}

void bm_lifting_conv(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(2));
    const int n = static_cast<int>(state.range(0));
    ConvSpec spec;
    spec.in_channels = 16;
    spec.out_channels = 16;
    spec.kernel_size = 3;
    spec.padding = 1;
    const GridTensor x = random_tensor(rng, {1, 16, n, n});
    const GridTensor k = random_tensor(rng, {16, 16, 3, 3}, 0.1);
    for (auto _ : state) benchmark::DoNotOptimize(lifting_conv(x, k, spec));
}

void bm_group_conv(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(3));
    const int n = static_cast<int>(state.range(0));
    ConvSpec spec;
    spec.in_channels = 16;
    spec.out_channels = 16;
    spec.kernel_size = 3;
    spec.padding = 1;
    const GridTensor x = random_tensor(rng, {1, 16, 4, n, n});
    const GridTensor k = random_tensor(rng, {16, 16, 4, 3, 3}, 0.1);
    for (auto _ : state) benchmark::DoNotOptimize(group_conv(x, k, spec));
}

void bm_encode_pillar(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(4));
    EncoderConfig cfg;
    EncoderWeights w(cfg);
    w.init(rng);
    std::vector<Point> pts(static_cast<std::size_t>(state.range(0)));
    for (Point& p : pts) {
        p.x = rng.uniform(-2.0, 2.0);
        p.y = rng.uniform(-2.0, 2.0);
        p.z = rng.uniform(-1.0, 1.0);
        p.intensity = rng.uniform(0.0, 1.0);
    }
    for (auto _ : state) benchmark::DoNotOptimize(encode_pillar(pts, w));
}

void bm_encode_cloud(benchmark::State& state) {
    GridConfig grid;
    SceneSpec spec;
    spec.seed = 5;
    const Scene scene = generate_scene(spec, grid);
    CounterRng rng(CounterRng::mix(5));
    EncoderConfig cfg;
    EncoderWeights w(cfg);
    w.init(rng);
    for (auto _ : state) benchmark::DoNotOptimize(encode_cloud(scene.cloud, w, grid));
    state.counters["points"] = static_cast<double>(scene.cloud.size());
}

void bm_backbone_forward(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(6));
    const int n = static_cast<int>(state.range(0));
    BackboneConfig cfg;
    cfg.widths = {16, 32, 64};
    BackboneWeights w(cfg, 32);
    w.init(rng);
    const GridTensor x = random_tensor(rng, {1, 32, n, n});
    for (auto _ : state) benchmark::DoNotOptimize(backbone_forward(x, w, false));
}

void bm_head_forward(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(7));
    const int n = static_cast<int>(state.range(0));
    HeadConfig cfg;
    HeadWeights w(cfg, 48);
    w.init(rng);
    const GridTensor bev = random_tensor(rng, {1, 48, n, n});
    for (auto _ : state) benchmark::DoNotOptimize(head_forward(bev, w));
}

void bm_decode(benchmark::State& state) {
    CounterRng rng(CounterRng::mix(8));
    GridConfig grid;
    HeadOutput out;
    const int n = grid.grid_cells;
    out.heatmap = random_tensor(rng, {1, 3, n, n});
    for (double& v : out.heatmap.values()) v = 1.0 / (1.0 + std::exp(-v));
    out.offset = random_tensor(rng, {1, 2, n, n}, 0.2);
    out.size_log = random_tensor(rng, {1, 3, n, n}, 0.2);
    out.yaw_vec = random_tensor(rng, {1, 2, n, n});
    out.z_center = random_tensor(rng, {1, 1, n, n});
    for (auto _ : state) benchmark::DoNotOptimize(decode(out, grid));
}

void bm_train_step(benchmark::State& state) {
    ModelConfig cfg;
    cfg.grid.pillar_size = 0.5;
    cfg.grid.grid_cells = 32;
    cfg.encoder.hidden = 8;
    cfg.encoder.rounds = 2;
    cfg.encoder.out_dim = 8;
    cfg.backbone.widths = {8, 12, 16};
    cfg.head.trunk_channels = 8;
    cfg.head.vector_hidden = 8;
    Model m(cfg);
    m.init(9);
    SceneSpec spec;
    spec.seed = 10;
    spec.min_boxes = 2;
    spec.max_boxes = 4;
    spec.point_density = 25.0;
    spec.clutter_density = 0.2;
    const std::vector<Scene> scenes{generate_scene(spec, cfg.grid)};
    Optimizer opt;
    opt.lr = 1e-3;
    const std::vector<int> batch{0};
    for (auto _ : state) benchmark::DoNotOptimize(train_step(m, scenes, batch, opt));
}

}  // namespace

BENCHMARK(bm_conv2d)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_lifting_conv)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_group_conv)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_encode_pillar)->Arg(4)->Arg(16)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_encode_cloud)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_backbone_forward)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_head_forward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_decode)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_train_step)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
