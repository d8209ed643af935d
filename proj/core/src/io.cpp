#include "eqdet/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace eqdet {

namespace {

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

void sort_for_output(std::vector<OrientedBox>& boxes) {
    std::sort(boxes.begin(), boxes.end(), [](const OrientedBox& a, const OrientedBox& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.x != b.x) return a.x < b.x;
        return a.y < b.y;
    });
}

std::uint32_t to_le(float f) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    if constexpr (std::endian::native == std::endian::big)
        u = ((u & 0xFFu) << 24) | ((u & 0xFF00u) << 8) | ((u >> 8) & 0xFF00u) | (u >> 24);
    return u;
}

float from_le(std::uint32_t u) {
    if constexpr (std::endian::native == std::endian::big)
        u = ((u & 0xFFu) << 24) | ((u & 0xFF00u) << 8) | ((u >> 8) & 0xFF00u) | (u >> 24);
    return std::bit_cast<float>(u);
}

}  // namespace

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed for " + path);
}

void save_cloud(const std::string& path, const PointCloud& cloud) {
    std::ostringstream out;
    for (const Point& p : cloud)
        out << fmt("%.9g", p.x) << ' ' << fmt("%.9g", p.y) << ' ' << fmt("%.9g", p.z) << ' '
            << fmt("%.9g", p.intensity) << '\n';
    write_text_file(path, out.str());
}

PointCloud load_cloud(const std::string& path) {
    std::istringstream in(read_text_file(path));
    PointCloud cloud;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::istringstream ls(line);
        Point p;
        if (!(ls >> p.x >> p.y >> p.z >> p.intensity))
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected `x y z intensity`");
        std::string extra;
        if (ls >> extra)
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": trailing fields");
        cloud.push_back(p);
    }
    return cloud;
}

std::string boxes_to_json(std::vector<OrientedBox> boxes) {
    sort_for_output(boxes);
    std::ostringstream out;
    out << "[\n";
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const OrientedBox& b = boxes[i];
        out << "  {\"x\": " << fmt("%.6f", b.x) << ", \"y\": " << fmt("%.6f", b.y) << ", \"z\": " << fmt("%.6f", b.z)
            << ", \"w\": " << fmt("%.6f", b.w) << ", \"l\": " << fmt("%.6f", b.l) << ", \"h\": " << fmt("%.6f", b.h)
            << ", \"yaw\": " << fmt("%.6f", b.yaw) << ", \"class_id\": " << b.class_id
            << ", \"score\": " << fmt("%.6f", b.score) << "}";
        if (i + 1 < boxes.size()) out << ',';
        out << '\n';
    }
    out << "]\n";
    return out.str();
}

void save_boxes(const std::string& path, std::vector<OrientedBox> boxes) {
    write_text_file(path, boxes_to_json(std::move(boxes)));
}

std::vector<OrientedBox> load_boxes(const std::string& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    if (!doc.is_array()) throw std::runtime_error(path + ": expected a JSON array of boxes");
    std::vector<OrientedBox> boxes;
    boxes.reserve(doc.size());
    for (const auto& rec : doc) {
        OrientedBox b;
        b.x = rec.at("x").get<double>();
        b.y = rec.at("y").get<double>();
        b.z = rec.at("z").get<double>();
        b.w = rec.at("w").get<double>();
        b.l = rec.at("l").get<double>();
        b.h = rec.at("h").get<double>();
        b.yaw = rec.at("yaw").get<double>();
        b.class_id = rec.at("class_id").get<int>();
        b.score = rec.at("score").get<double>();
        boxes.push_back(b);
    }
    return boxes;
}

void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, GridTensor*>>& state) {
    std::ostringstream manifest;
    std::string blob;
    std::int64_t offset = 0;
    for (const auto& [name, tensor] : state) {
        manifest << "tensor " << name << ' ' << tensor->rank();
        for (int a = 0; a < tensor->rank(); ++a) manifest << ' ' << tensor->dim(a);
        manifest << ' ' << offset << '\n';
        for (std::int64_t i = 0; i < tensor->numel(); ++i) {
            const std::uint32_t u = to_le(static_cast<float>(tensor->data()[i]));
            char bytes[4];
            std::memcpy(bytes, &u, 4);
            blob.append(bytes, 4);
        }
        offset += tensor->numel() * 4;
    }
    std::ostringstream out;
    out << "eqdet-checkpoint v1\n" << manifest.str() << "data\n" << blob;
    write_text_file(path, out.str());
}

void load_checkpoint(const std::string& path, const std::vector<std::pair<std::string, GridTensor*>>& state) {
    const std::string raw = read_text_file(path);
    std::istringstream in(raw);
    std::string line;
    if (!std::getline(in, line) || line != "eqdet-checkpoint v1")
        throw std::runtime_error(path + ": not a checkpoint file");

    struct Entry {
        std::vector<int> shape;
        std::int64_t offset;
    };
    std::map<std::string, Entry> entries;
    while (std::getline(in, line)) {
        if (line == "data") break;
        std::istringstream ls(line);
        std::string tag, name;
        int rank = 0;
        if (!(ls >> tag >> name >> rank) || tag != "tensor")
            throw std::runtime_error(path + ": bad manifest line: " + line);
        Entry e;
        e.shape.resize(static_cast<std::size_t>(rank));
        for (int& d : e.shape)
            if (!(ls >> d)) throw std::runtime_error(path + ": truncated manifest line: " + line);
        if (!(ls >> e.offset)) throw std::runtime_error(path + ": missing offset: " + line);
        if (!entries.emplace(name, std::move(e)).second)
            throw std::runtime_error(path + ": duplicate tensor " + name);
    }
    const std::size_t blob_start = static_cast<std::size_t>(in.tellg());
    if (line != "data") throw std::runtime_error(path + ": missing data section");

    if (entries.size() != state.size()) throw std::runtime_error(path + ": tensor count mismatch");
    for (const auto& [name, tensor] : state) {
        const auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error(path + ": missing tensor " + name);
        if (it->second.shape != tensor->shape()) throw std::runtime_error(path + ": shape mismatch for " + name);
        const std::size_t at = blob_start + static_cast<std::size_t>(it->second.offset);
        if (at + static_cast<std::size_t>(tensor->numel()) * 4 > raw.size())
            throw std::runtime_error(path + ": blob truncated at " + name);
        for (std::int64_t i = 0; i < tensor->numel(); ++i) {
            std::uint32_t u;
            std::memcpy(&u, raw.data() + at + static_cast<std::size_t>(i) * 4, 4);
            tensor->data()[i] = static_cast<double>(from_le(u));
        }
    }
}

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw std::runtime_error("config line " + std::to_string(line_no) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw std::runtime_error("config line " + std::to_string(line_no) + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(line_no) + ": expected `key = value`");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
        const std::string full = section.empty() ? key : section + "." + key;
        if (!out.emplace(full, value).second)
            throw std::runtime_error("config line " + std::to_string(line_no) + ": duplicate key " + full);
    }
    return out;
}

ConfigMap parse_config_file(const std::string& path) { return parse_config_text(read_text_file(path)); }

std::string dump_config(const ConfigMap& config) {
    std::ostringstream out;
    // bare keys first: once a [section] opens there is no way back to the
    // global scope on re-parse
    bool wrote = false;
    for (const auto& [key, value] : config)
        if (key.find('.') == std::string::npos) {
            out << key << " = " << value << '\n';
            wrote = true;
        }
    std::string section;
    for (const auto& [key, value] : config) {
        const auto dot = key.find('.');
        if (dot == std::string::npos) continue;
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            if (wrote) out << '\n';
            out << '[' << sec << "]\n";
            section = sec;
            wrote = true;
        }
        out << key.substr(dot + 1) << " = " << value << '\n';
    }
    return out.str();
}

std::string eval_report_json(const EvalReport& report) {
    std::ostringstream out;
    out << "{\n";
    out << "  \"n_scenes\": " << report.n_scenes << ",\n";
    out << "  \"n_predictions\": " << report.n_predictions << ",\n";
    out << "  \"n_ground_truth\": " << report.n_ground_truth << ",\n";
    out << "  \"ap_thresholds\": [";
    for (std::size_t i = 0; i < report.options.ap_thresholds.size(); ++i) {
        if (i > 0) out << ", ";
        out << fmt("%.6f", report.options.ap_thresholds[i]);
    }
    out << "],\n";
    out << "  \"tp_threshold\": " << fmt("%.6f", report.options.tp_threshold) << ",\n";
    out << "  \"classes\": [\n";
    const auto& presets = class_presets();
    for (std::size_t c = 0; c < report.classes.size(); ++c) {
        const ClassEval& ce = report.classes[c];
        const char* name =
            ce.class_id >= 0 && ce.class_id < static_cast<int>(presets.size())
                ? presets[static_cast<std::size_t>(ce.class_id)].name
                : "unknown";
        out << "    {\"class_id\": " << ce.class_id << ", \"name\": \"" << name << "\", \"n_gt\": " << ce.n_gt
            << ", \"ap\": [";
        for (std::size_t i = 0; i < ce.ap.size(); ++i) {
            if (i > 0) out << ", ";
            out << fmt("%.6f", ce.ap[i]);
        }
        out << "], \"mean_ap\": " << fmt("%.6f", ce.mean_ap) << ", \"ate\": " << fmt("%.6f", ce.tp.ate)
            << ", \"ase\": " << fmt("%.6f", ce.tp.ase) << ", \"aoe\": " << fmt("%.6f", ce.tp.aoe)
            << ", \"no_matches\": " << (ce.tp.no_matches ? "true" : "false") << "}";
        if (c + 1 < report.classes.size()) out << ',';
        out << '\n';
    }
    out << "  ],\n";
    out << "  \"mean_ap\": " << fmt("%.6f", report.mean_ap) << ",\n";
    out << "  \"mean_ate\": " << fmt("%.6f", report.mean_ate) << ",\n";
    out << "  \"mean_ase\": " << fmt("%.6f", report.mean_ase) << ",\n";
    out << "  \"mean_aoe\": " << fmt("%.6f", report.mean_aoe) << ",\n";
    out << "  \"nds\": " << fmt("%.6f", report.nds) << "\n";
    out << "}\n";
    return out.str();
}

std::string eval_report_table(const EvalReport& report) {
    std::ostringstream out;
    char buf[256];
    out << "class         n_gt";
    for (double t : report.options.ap_thresholds) {
        std::snprintf(buf, sizeof(buf), "  AP@%-4.2g", t);
        out << buf;
    }
    out << "   meanAP      ATE      ASE      AOE\n";
    const auto& presets = class_presets();
    for (const ClassEval& ce : report.classes) {
        const char* name =
            ce.class_id >= 0 && ce.class_id < static_cast<int>(presets.size())
                ? presets[static_cast<std::size_t>(ce.class_id)].name
                : "unknown";
        std::snprintf(buf, sizeof(buf), "%-12s %5d", name, ce.n_gt);
        out << buf;
        for (double ap : ce.ap) {
            std::snprintf(buf, sizeof(buf), "  %7.4f", ap);
            out << buf;
        }
        std::snprintf(buf, sizeof(buf), "  %7.4f  %7.4f  %7.4f  %7.4f", ce.mean_ap, ce.tp.ate, ce.tp.ase, ce.tp.aoe);
        out << buf;
        if (ce.tp.no_matches) out << "  (no matches)";
        out << '\n';
    }
    std::snprintf(buf, sizeof(buf), "mAP %.4f  mATE %.4f  mASE %.4f  mAOE %.4f  NDS %.4f\n", report.mean_ap,
                  report.mean_ate, report.mean_ase, report.mean_aoe, report.nds);
    out << buf;
    return out.str();
}

void save_pgm(const std::string& path, const GridTensor& plane, double lo, double hi) {
    if (plane.rank() != 2) throw std::invalid_argument("save_pgm: expected a [Y, X] plane");
    if (!(hi > lo)) throw std::invalid_argument("save_pgm: need hi > lo");
    const int h = plane.dim(0), w = plane.dim(1);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
    for (std::int64_t i = 0; i < plane.numel(); ++i) {
        const double t = std::clamp((plane.data()[i] - lo) / (hi - lo), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
    write_text_file(path, out);
}

namespace {

void svg_box(std::ostringstream& out, const OrientedBox& b, const char* stroke) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double hx = 0.5 * b.l, hy = 0.5 * b.w;
    const double corners[4][2] = {{hx, hy}, {hx, -hy}, {-hx, -hy}, {-hx, hy}};
    out << "<polygon points=\"";
    for (int i = 0; i < 4; ++i) {
        const double x = b.x + c * corners[i][0] - s * corners[i][1];
        const double y = b.y + s * corners[i][0] + c * corners[i][1];
        if (i > 0) out << ' ';
        out << fmt("%.3f", x) << ',' << fmt("%.3f", -y);
    }
    out << "\" fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"0.06\"/>\n";
    out << "<line x1=\"" << fmt("%.3f", b.x) << "\" y1=\"" << fmt("%.3f", -b.y) << "\" x2=\""
        << fmt("%.3f", b.x + c * hx) << "\" y2=\"" << fmt("%.3f", -(b.y + s * hx)) << "\" stroke=\"" << stroke
        << "\" stroke-width=\"0.06\"/>\n";
}

}  // namespace

std::string scene_svg(const PointCloud& cloud, const std::vector<OrientedBox>& gt,
                      const std::vector<OrientedBox>& dets, const GridConfig& cfg) {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << fmt("%.3f", cfg.x_min) << ' '
        << fmt("%.3f", -cfg.y_max) << ' ' << fmt("%.3f", cfg.x_max - cfg.x_min) << ' '
        << fmt("%.3f", cfg.y_max - cfg.y_min) << "\">\n";
    out << "<rect x=\"" << fmt("%.3f", cfg.x_min) << "\" y=\"" << fmt("%.3f", -cfg.y_max) << "\" width=\""
        << fmt("%.3f", cfg.x_max - cfg.x_min) << "\" height=\"" << fmt("%.3f", cfg.y_max - cfg.y_min)
        << "\" fill=\"#101418\"/>\n";
    for (const Point& p : cloud) {
        const int shade = 70 + static_cast<int>(std::lround(std::clamp(p.intensity, 0.0, 1.0) * 185.0));
        out << "<circle cx=\"" << fmt("%.3f", p.x) << "\" cy=\"" << fmt("%.3f", -p.y)
            << "\" r=\"0.04\" fill=\"rgb(" << shade << ',' << shade << ',' << shade << ")\"/>\n";
    }
    for (const OrientedBox& b : gt) svg_box(out, b, "#3fbf57");
    for (const OrientedBox& b : dets) svg_box(out, b, "#e04a3f");
    out << "</svg>\n";
    return out.str();
}

}  // namespace eqdet
