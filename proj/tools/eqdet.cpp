#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "eqdet/audit.hpp"
#include "eqdet/io.hpp"
#include "eqdet/model.hpp"

namespace fs = std::filesystem;
using namespace eqdet;

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.15g", v);
    if (std::strtod(buf, nullptr) != v) std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config key " + key + ": expected an integer, got `" + v + "`");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config key " + key + ": expected an unsigned integer, got `" + v + "`");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config key " + key + ": expected a number, got `" + v + "`");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::runtime_error("config key " + key + ": expected true/false, got `" + v + "`");
}

struct RunConfig {
    std::string scene_dir = "scenes";
    std::string checkpoint = "model.ckpt";
    std::string out_dir = "out";

    ModelConfig model;
    SceneSpec scene;
    int scene_count = 8;

    std::uint64_t init_seed = 1;
    std::uint64_t scene_seed = 100;

    FitOptions train;
    int max_dets = 20;
    double score_thresh = 0.25;
    double tp_threshold = 2.0;
    bool five_term_nds = false;
    double audit_tolerance = 1e-5;
    int sweep_scenes = 1;
    int sweep_headings = 36;

    void apply(const std::string& key, const std::string& v);
    ConfigMap to_map() const;
};

void RunConfig::apply(const std::string& key, const std::string& v) {
    GridConfig& g = model.grid;
    EncoderConfig& e = model.encoder;
    BackboneConfig& b = model.backbone;
    HeadConfig& h = model.head;

    if (key == "paths.scenes") scene_dir = v;
    else if (key == "paths.checkpoint") checkpoint = v;
    else if (key == "paths.out") out_dir = v;
    else if (key == "grid.x_min") g.x_min = parse_double(key, v);
    else if (key == "grid.x_max") g.x_max = parse_double(key, v);
    else if (key == "grid.y_min") g.y_min = parse_double(key, v);
    else if (key == "grid.y_max") g.y_max = parse_double(key, v);
    else if (key == "grid.z_min") g.z_min = parse_double(key, v);
    else if (key == "grid.z_max") g.z_max = parse_double(key, v);
    else if (key == "grid.pillar_size") g.pillar_size = parse_double(key, v);
    else if (key == "grid.grid_cells") g.grid_cells = parse_int(key, v);
    else if (key == "encoder.hidden") e.hidden = parse_int(key, v);
    else if (key == "encoder.rounds") e.rounds = parse_int(key, v);
    else if (key == "encoder.out_dim") e.out_dim = parse_int(key, v);
    else if (key == "encoder.max_points_per_pillar") e.max_points_per_pillar = parse_int(key, v);
    else if (key == "encoder.rbf_count") e.rbf.count = parse_int(key, v);
    else if (key == "encoder.rbf_d_max") e.rbf.d_max = parse_double(key, v);
    else if (key == "encoder.rbf_gamma") e.rbf.gamma = parse_double(key, v);
    else if (key == "backbone.width1") b.widths[0] = parse_int(key, v);
    else if (key == "backbone.width2") b.widths[1] = parse_int(key, v);
    else if (key == "backbone.width3") b.widths[2] = parse_int(key, v);
    else if (key == "backbone.kernel_size") b.kernel_size = parse_int(key, v);
    else if (key == "backbone.plain") b.plain = parse_bool(key, v);
    else if (key == "backbone.mean_pool") b.mean_pool = parse_bool(key, v);
    else if (key == "head.n_classes") h.n_classes = parse_int(key, v);
    else if (key == "head.trunk_channels") h.trunk_channels = parse_int(key, v);
    else if (key == "head.vector_hidden") h.vector_hidden = parse_int(key, v);
    else if (key == "head.plain") h.plain = parse_bool(key, v);
    else if (key == "scene.count") scene_count = parse_int(key, v);
    else if (key == "scene.min_boxes") scene.min_boxes = parse_int(key, v);
    else if (key == "scene.max_boxes") scene.max_boxes = parse_int(key, v);
    else if (key == "scene.weight_car") scene.class_weights[0] = parse_double(key, v);
    else if (key == "scene.weight_pedestrian") scene.class_weights[1] = parse_double(key, v);
    else if (key == "scene.weight_cyclist") scene.class_weights[2] = parse_double(key, v);
    else if (key == "scene.size_jitter") scene.size_jitter = parse_double(key, v);
    else if (key == "scene.point_density") scene.point_density = parse_double(key, v);
    else if (key == "scene.clutter_density") scene.clutter_density = parse_double(key, v);
    else if (key == "scene.noise_sigma") scene.noise_sigma = parse_double(key, v);
    else if (key == "scene.center_margin") scene.center_margin = parse_double(key, v);
    else if (key == "scene.min_gap") scene.min_gap = parse_double(key, v);
    else if (key == "seeds.init") init_seed = parse_u64(key, v);
    else if (key == "seeds.scene") scene_seed = parse_u64(key, v);
    else if (key == "train.steps") train.steps = parse_int(key, v);
    else if (key == "train.batch_size") train.batch_size = parse_int(key, v);
    else if (key == "train.lr") train.lr = parse_double(key, v);
    else if (key == "train.momentum") train.momentum = parse_double(key, v);
    else if (key == "detect.max_dets") max_dets = parse_int(key, v);
    else if (key == "detect.score_thresh") score_thresh = parse_double(key, v);
    else if (key == "eval.tp_threshold") tp_threshold = parse_double(key, v);
    else if (key == "eval.five_term_nds") five_term_nds = parse_bool(key, v);
    else if (key == "audit.tolerance") audit_tolerance = parse_double(key, v);
    else if (key == "audit.sweep_scenes") sweep_scenes = parse_int(key, v);
    else if (key == "audit.sweep_headings") sweep_headings = parse_int(key, v);
    else throw std::runtime_error("unknown config key: " + key);
}

ConfigMap RunConfig::to_map() const {
    ConfigMap m;
    const auto put_d = [&m](const char* k, double v) { m[k] = format_double(v); };
    const auto put_i = [&m](const char* k, long long v) { m[k] = std::to_string(v); };
    const auto put_b = [&m](const char* k, bool v) { m[k] = v ? "true" : "false"; };

    m["paths.scenes"] = scene_dir;
    m["paths.checkpoint"] = checkpoint;
    m["paths.out"] = out_dir;
    put_d("grid.x_min", model.grid.x_min);
    put_d("grid.x_max", model.grid.x_max);
    put_d("grid.y_min", model.grid.y_min);
    put_d("grid.y_max", model.grid.y_max);
    put_d("grid.z_min", model.grid.z_min);
    put_d("grid.z_max", model.grid.z_max);
    put_d("grid.pillar_size", model.grid.pillar_size);
    put_i("grid.grid_cells", model.grid.grid_cells);
    put_i("encoder.hidden", model.encoder.hidden);
    put_i("encoder.rounds", model.encoder.rounds);
    put_i("encoder.out_dim", model.encoder.out_dim);
    put_i("encoder.max_points_per_pillar", model.encoder.max_points_per_pillar);
    put_i("encoder.rbf_count", model.encoder.rbf.count);
    put_d("encoder.rbf_d_max", model.encoder.rbf.d_max);
    put_d("encoder.rbf_gamma", model.encoder.rbf.gamma);
    put_i("backbone.width1", model.backbone.widths[0]);
    put_i("backbone.width2", model.backbone.widths[1]);
    put_i("backbone.width3", model.backbone.widths[2]);
    put_i("backbone.kernel_size", model.backbone.kernel_size);
    put_b("backbone.plain", model.backbone.plain);
    put_b("backbone.mean_pool", model.backbone.mean_pool);
    put_i("head.n_classes", model.head.n_classes);
    put_i("head.trunk_channels", model.head.trunk_channels);
    put_i("head.vector_hidden", model.head.vector_hidden);
    put_b("head.plain", model.head.plain);
    put_i("scene.count", scene_count);
    put_i("scene.min_boxes", scene.min_boxes);
    put_i("scene.max_boxes", scene.max_boxes);
    put_d("scene.weight_car", scene.class_weights[0]);
    put_d("scene.weight_pedestrian", scene.class_weights[1]);
    put_d("scene.weight_cyclist", scene.class_weights[2]);
    put_d("scene.size_jitter", scene.size_jitter);
    put_d("scene.point_density", scene.point_density);
    put_d("scene.clutter_density", scene.clutter_density);
    put_d("scene.noise_sigma", scene.noise_sigma);
    put_d("scene.center_margin", scene.center_margin);
    put_d("scene.min_gap", scene.min_gap);
    put_i("seeds.init", static_cast<long long>(init_seed));
    put_i("seeds.scene", static_cast<long long>(scene_seed));
    put_i("train.steps", train.steps);
    put_i("train.batch_size", train.batch_size);
    put_d("train.lr", train.lr);
    put_d("train.momentum", train.momentum);
    put_i("detect.max_dets", max_dets);
    put_d("detect.score_thresh", score_thresh);
    put_d("eval.tp_threshold", tp_threshold);
    put_b("eval.five_term_nds", five_term_nds);
    put_d("audit.tolerance", audit_tolerance);
    put_i("audit.sweep_scenes", sweep_scenes);
    put_i("audit.sweep_headings", sweep_headings);
    return m;
}

struct CommonFlags {
    std::string config;
    std::string out;
    std::int64_t seed = -1;
    int jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "configuration file (key = value with [sections])");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seed", f.seed, "seed override for this command");
    cmd->add_option("--jobs", f.jobs, "parallel scene fan-out")->check(CLI::Range(1, 256));
}

RunConfig load_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config.empty())
        for (const auto& [k, v] : parse_config_file(f.config)) cfg.apply(k, v);
    if (!f.out.empty()) cfg.out_dir = f.out;
    return cfg;
}

void dump_used_config(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    write_text_file((fs::path(cfg.out_dir) / "config_used.txt").string(), dump_config(cfg.to_map()));
}

/// Runs fn(0..n-1) across up to `jobs` threads; each index writes only its
/// own slot, so results are ordered and identical to a serial run.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(jobs));
    for (int j = 0; j < jobs; ++j)
        threads.emplace_back([&, j] {
            try {
                for (;;) {
                    const int i = next.fetch_add(1);
                    if (i >= n) break;
                    fn(i);
                }
            } catch (...) {
                errors[static_cast<std::size_t>(j)] = std::current_exception();
                next.store(n);
            }
        });
    for (std::thread& t : threads) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

std::vector<fs::path> list_files(const std::string& dir, const std::string& suffix) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir + " is not a directory");
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name.size() > suffix.size() && name.ends_with(suffix)) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string bundle_stem(const fs::path& cloud_path) {
    std::string name = cloud_path.filename().string();
    return name.substr(0, name.size() - 4);  // strip ".xyz"
}

std::vector<Scene> load_scene_dir(const std::string& dir) {
    std::vector<Scene> scenes;
    for (const fs::path& p : list_files(dir, ".xyz")) {
        Scene s;
        s.cloud = load_cloud(p.string());
        const fs::path gt = p.parent_path() / (bundle_stem(p) + ".gt.json");
        if (!fs::exists(gt)) throw std::runtime_error("missing ground truth file " + gt.string());
        s.gt = load_boxes(gt.string());
        scenes.push_back(std::move(s));
    }
    if (scenes.empty()) throw std::runtime_error("no scene bundles (*.xyz) in " + dir);
    return scenes;
}

int run_gen(const CommonFlags& f) {
    RunConfig cfg = load_config(f);
    if (f.seed >= 0) cfg.scene_seed = static_cast<std::uint64_t>(f.seed);
    dump_used_config(cfg);

    std::vector<Scene> scenes(static_cast<std::size_t>(cfg.scene_count));
    parallel_for(cfg.scene_count, f.jobs, [&](int i) {
        SceneSpec spec = cfg.scene;
        spec.seed = cfg.scene_seed + static_cast<std::uint64_t>(i);
        scenes[static_cast<std::size_t>(i)] = generate_scene(spec, cfg.model.grid);
    });
    for (int i = 0; i < cfg.scene_count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        const fs::path base = fs::path(cfg.out_dir) / name;
        save_cloud(base.string() + ".xyz", scenes[static_cast<std::size_t>(i)].cloud);
        save_boxes(base.string() + ".gt.json", scenes[static_cast<std::size_t>(i)].gt);
    }
    std::cout << "wrote " << cfg.scene_count << " scene bundles to " << cfg.out_dir << "\n";
    return 0;
}

int run_train(const CommonFlags& f, const std::string& scenes_flag) {
    RunConfig cfg = load_config(f);
    if (!scenes_flag.empty()) cfg.scene_dir = scenes_flag;
    if (f.seed >= 0) cfg.init_seed = static_cast<std::uint64_t>(f.seed);
    dump_used_config(cfg);

    const std::vector<Scene> scenes = load_scene_dir(cfg.scene_dir);
    Model model(cfg.model);
    model.init(cfg.init_seed);

    Optimizer opt;
    opt.lr = cfg.train.lr;
    opt.momentum = cfg.train.momentum;

    std::ostringstream log;
    const int n = static_cast<int>(scenes.size());
    for (int step = 0; step < cfg.train.steps; ++step) {
        std::vector<int> batch(static_cast<std::size_t>(cfg.train.batch_size));
        for (int i = 0; i < cfg.train.batch_size; ++i)
            batch[static_cast<std::size_t>(i)] = (step * cfg.train.batch_size + i) % n;
        const LossTerms lt = train_step(model, scenes, batch, opt);
        char line[256];
        std::snprintf(line, sizeof(line), "step %d total %.17g heatmap %.17g offset %.17g size %.17g yaw %.17g z %.17g\n",
                      step, lt.total, lt.heatmap, lt.offset, lt.size, lt.yaw, lt.z);
        log << line;
        if (step % 25 == 0 || step + 1 == cfg.train.steps)
            std::printf("step %5d  loss %.4f (heatmap %.4f)\n", step, lt.total, lt.heatmap);
    }
    write_text_file((fs::path(cfg.out_dir) / "train_log.txt").string(), log.str());
    const std::string ckpt = (fs::path(cfg.out_dir) / "model.ckpt").string();
    save_checkpoint(ckpt, model.named_state());
    std::cout << "checkpoint written to " << ckpt << "\n";
    return 0;
}

int run_detect(const CommonFlags& f, const std::string& scenes_flag, const std::string& ckpt_flag) {
    RunConfig cfg = load_config(f);
    if (!scenes_flag.empty()) cfg.scene_dir = scenes_flag;
    if (!ckpt_flag.empty()) cfg.checkpoint = ckpt_flag;
    dump_used_config(cfg);

    Model model(cfg.model);
    load_checkpoint(cfg.checkpoint, model.named_state());

    const std::vector<fs::path> clouds = list_files(cfg.scene_dir, ".xyz");
    if (clouds.empty()) throw std::runtime_error("no point clouds (*.xyz) in " + cfg.scene_dir);
    std::vector<std::vector<OrientedBox>> dets(clouds.size());
    parallel_for(static_cast<int>(clouds.size()), f.jobs, [&](int i) {
        const PointCloud cloud = load_cloud(clouds[static_cast<std::size_t>(i)].string());
        dets[static_cast<std::size_t>(i)] = detect_cloud(model, cloud, cfg.max_dets, cfg.score_thresh);
    });
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        const fs::path out = fs::path(cfg.out_dir) / (bundle_stem(clouds[i]) + ".det.json");
        save_boxes(out.string(), dets[i]);
    }
    std::cout << "wrote " << clouds.size() << " detection files to " << cfg.out_dir << "\n";
    return 0;
}

int run_eval(const CommonFlags& f, const std::string& scenes_flag, const std::string& dets_dir) {
    RunConfig cfg = load_config(f);
    if (!scenes_flag.empty()) cfg.scene_dir = scenes_flag;
    dump_used_config(cfg);

    const std::vector<fs::path> gt_files = list_files(cfg.scene_dir, ".gt.json");
    if (gt_files.empty()) throw std::runtime_error("no ground truth files (*.gt.json) in " + cfg.scene_dir);
    std::vector<std::vector<OrientedBox>> gts, preds;
    for (const fs::path& g : gt_files) {
        const std::string name = g.filename().string();
        const std::string stem = name.substr(0, name.size() - std::string(".gt.json").size());
        const fs::path det = fs::path(dets_dir) / (stem + ".det.json");
        if (!fs::exists(det)) throw std::runtime_error("missing detections file " + det.string());
        gts.push_back(load_boxes(g.string()));
        preds.push_back(load_boxes(det.string()));
    }

    EvalOptions opts;
    opts.tp_threshold = cfg.tp_threshold;
    opts.five_term_nds = cfg.five_term_nds;
    const EvalReport report = evaluate(preds, gts, cfg.model.head.n_classes, opts);

    write_text_file((fs::path(cfg.out_dir) / "eval.json").string(), eval_report_json(report));
    const std::string table = eval_report_table(report);
    write_text_file((fs::path(cfg.out_dir) / "eval.txt").string(), table);
    std::cout << table;
    return 0;
}

int run_audit(const CommonFlags& f, const std::string& ckpt_flag, double tol_flag, bool plain_flag) {
    RunConfig cfg = load_config(f);
    if (!ckpt_flag.empty()) cfg.checkpoint = ckpt_flag;
    if (tol_flag > 0.0) cfg.audit_tolerance = tol_flag;
    if (plain_flag) {
        cfg.model.backbone.plain = true;
        cfg.model.head.plain = true;
    }
    if (f.seed >= 0) {
        cfg.init_seed = static_cast<std::uint64_t>(f.seed);
        cfg.scene_seed = static_cast<std::uint64_t>(f.seed);
    }
    dump_used_config(cfg);

    Model model(cfg.model);
    if (!ckpt_flag.empty())
        load_checkpoint(cfg.checkpoint, model.named_state());
    else
        model.init(cfg.init_seed);

    const AuditReport report = audit_model(model, cfg.scene_seed, cfg.audit_tolerance);
    std::ostringstream text;
    text << audit_report_text(report);

    if (cfg.sweep_scenes > 0 && cfg.sweep_headings > 0) {
        std::vector<Scene> scenes;
        for (int i = 0; i < cfg.sweep_scenes; ++i) {
            SceneSpec spec = cfg.scene;
            spec.seed = cfg.scene_seed + 1000 + static_cast<std::uint64_t>(i);
            scenes.push_back(generate_scene(spec, cfg.model.grid));
        }
        const std::vector<SweepRow> rows = heading_sweep(model, scenes, cfg.sweep_headings);
        text << "\nrotation sweep (" << cfg.sweep_scenes << " scenes)\n" << sweep_table_text(rows);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "AOE std across headings: %.6f\n", aoe_std(rows));
        text << buf;
    }

    write_text_file((fs::path(cfg.out_dir) / "audit.txt").string(), text.str());
    std::cout << text.str();
    return report.pass ? 0 : 2;
}

int run_plot(const CommonFlags& f, const std::string& scenes_flag, const std::string& dets_dir,
             const std::string& ckpt_flag) {
    RunConfig cfg = load_config(f);
    if (!scenes_flag.empty()) cfg.scene_dir = scenes_flag;
    if (!ckpt_flag.empty()) cfg.checkpoint = ckpt_flag;
    dump_used_config(cfg);

    std::unique_ptr<Model> model;
    if (!ckpt_flag.empty()) {
        model = std::make_unique<Model>(cfg.model);
        load_checkpoint(cfg.checkpoint, model->named_state());
    }

    const std::vector<fs::path> clouds = list_files(cfg.scene_dir, ".xyz");
    if (clouds.empty()) throw std::runtime_error("no point clouds (*.xyz) in " + cfg.scene_dir);
    for (const fs::path& p : clouds) {
        const std::string stem = bundle_stem(p);
        const PointCloud cloud = load_cloud(p.string());

        std::vector<OrientedBox> gt;
        const fs::path gt_path = p.parent_path() / (stem + ".gt.json");
        if (fs::exists(gt_path)) gt = load_boxes(gt_path.string());

        std::vector<OrientedBox> dets;
        if (!dets_dir.empty()) {
            const fs::path det_path = fs::path(dets_dir) / (stem + ".det.json");
            if (fs::exists(det_path)) dets = load_boxes(det_path.string());
        }

        write_text_file((fs::path(cfg.out_dir) / (stem + ".svg")).string(),
                        scene_svg(cloud, gt, dets, cfg.model.grid));

        if (model != nullptr) {
            const HeadOutput out = model_forward(*model, {&cloud}, false);
            const int n = out.heatmap.dim(2);
            for (int k = 0; k < cfg.model.head.n_classes; ++k) {
                GridTensor plane({n, n});
                for (int y = 0; y < n; ++y)
                    for (int x = 0; x < n; ++x) plane.at(y, x) = out.heatmap.at(0, k, y, x);
                char name[64];
                std::snprintf(name, sizeof(name), "%s_heatmap_%d.pgm", stem.c_str(), k);
                save_pgm((fs::path(cfg.out_dir) / name).string(), plane);
            }
        }
    }
    std::cout << "wrote plots for " << clouds.size() << " scenes to " << cfg.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-equivariance 3D detection pipeline"};
    app.require_subcommand(1);

    CommonFlags gen_f, train_f, detect_f, eval_f, audit_f, plot_f;
    std::string train_scenes, detect_scenes, detect_ckpt, eval_scenes, eval_dets, audit_ckpt;
    std::string plot_scenes, plot_dets, plot_ckpt;
    double audit_tol = -1.0;
    bool audit_plain = false;

    CLI::App* gen = app.add_subcommand("gen", "generate synthetic scene bundles");
    add_common(gen, gen_f);

    CLI::App* train = app.add_subcommand("train", "train a model on a scene directory");
    add_common(train, train_f);
    train->add_option("--scenes", train_scenes, "scene bundle directory");

    CLI::App* detect = app.add_subcommand("detect", "run inference over a scene directory");
    add_common(detect, detect_f);
    detect->add_option("--scenes", detect_scenes, "scene bundle directory");
    detect->add_option("--checkpoint", detect_ckpt, "checkpoint to load");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate detections against ground truth");
    add_common(eval_cmd, eval_f);
    eval_cmd->add_option("--scenes", eval_scenes, "directory with *.gt.json ground truth");
    eval_cmd->add_option("--dets", eval_dets, "directory with *.det.json detections")->required();

    CLI::App* audit = app.add_subcommand("audit", "equivariance audit and rotation sweep");
    add_common(audit, audit_f);
    audit->add_option("--checkpoint", audit_ckpt, "checkpoint to audit (default: random weights)");
    audit->add_option("--tolerance", audit_tol, "stage residual tolerance");
    audit->add_flag("--plain", audit_plain, "audit the plain-convolution ablation");

    CLI::App* plot = app.add_subcommand("plot", "emit BEV SVG scatter plots and heatmap PGMs");
    add_common(plot, plot_f);
    plot->add_option("--scenes", plot_scenes, "scene bundle directory");
    plot->add_option("--dets", plot_dets, "directory with *.det.json detections");
    plot->add_option("--checkpoint", plot_ckpt, "checkpoint for heatmap dumps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) return run_gen(gen_f);
        if (train->parsed()) return run_train(train_f, train_scenes);
        if (detect->parsed()) return run_detect(detect_f, detect_scenes, detect_ckpt);
        if (eval_cmd->parsed()) return run_eval(eval_f, eval_scenes, eval_dets);
        if (audit->parsed()) return run_audit(audit_f, audit_ckpt, audit_tol, audit_plain);
        if (plot->parsed()) return run_plot(plot_f, plot_scenes, plot_dets, plot_ckpt);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
