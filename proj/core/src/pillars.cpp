#include "eqdet/pillars.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>

namespace eqdet {

namespace {

// y += W x with W a [rows, cols] tensor.
void matvec_acc(const GridTensor& W, const double* x, double* y) {
    const int rows = W.dim(0), cols = W.dim(1);
    const double* w = W.data();
    for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* wr = w + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] += acc;
    }
}

// y += W^T x
void matvec_t_acc(const GridTensor& W, const double* x, double* y) {
    const int rows = W.dim(0), cols = W.dim(1);
    const double* w = W.data();
    for (int r = 0; r < rows; ++r) {
        const double xr = x[r];
        if (xr == 0.0) continue;
        const double* wr = w + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) y[c] += wr[c] * xr;
    }
}

// G += scale * a b^T with G a [len(a), len(b)] tensor.
void outer_acc(GridTensor& G, const double* a, const double* b, double scale = 1.0) {
    const int rows = G.dim(0), cols = G.dim(1);
    double* g = G.data();
    for (int r = 0; r < rows; ++r) {
        const double ar = scale * a[r];
        if (ar == 0.0) continue;
        double* gr = g + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) gr[c] += ar * b[c];
    }
}

void vec_acc(GridTensor& g, const double* a, double scale = 1.0) {
    double* p = g.data();
    for (int i = 0; i < g.dim(0); ++i) p[i] += scale * a[i];
}

bool point_less(const Point& a, const Point& b) {
    return std::tie(a.x, a.y, a.z, a.intensity) < std::tie(b.x, b.y, b.z, b.intensity);
}

}  // namespace

void GridConfig::validate() const {
    if (pillar_size <= 0.0) throw std::invalid_argument("GridConfig: pillar_size must be positive");
    if (grid_cells < 1) throw std::invalid_argument("GridConfig: grid_cells must be >= 1");
    if (!(x_max > x_min) || !(y_max > y_min) || !(z_max > z_min))
        throw std::invalid_argument("GridConfig: empty range");
    const double nx = (x_max - x_min) / pillar_size;
    const double ny = (y_max - y_min) / pillar_size;
    if (std::abs(nx - grid_cells) > 1e-9 || std::abs(ny - grid_cells) > 1e-9)
        throw std::invalid_argument("GridConfig: range must equal grid_cells * pillar_size on both axes");
}

void RBFSpec::validate() const {
    if (count < 2) throw std::invalid_argument("RBFSpec: need at least two centers");
    if (d_max <= 0.0 || gamma <= 0.0) throw std::invalid_argument("RBFSpec: d_max and gamma must be positive");
}

void EncoderConfig::validate() const {
    if (hidden < 1 || rounds < 1 || out_dim < 1) throw std::invalid_argument("EncoderConfig: sizes must be >= 1");
    if (max_points_per_pillar < 1) throw std::invalid_argument("EncoderConfig: max_points_per_pillar must be >= 1");
    rbf.validate();
}

EncoderWeights::Round::Round(int index, int hidden, int rbf_count)
    : agg_msg("encoder.round" + std::to_string(index) + ".agg_msg", {hidden, hidden}),
      agg_rbf("encoder.round" + std::to_string(index) + ".agg_rbf", {hidden, rbf_count}),
      agg_bias("encoder.round" + std::to_string(index) + ".agg_bias", {hidden}),
      upd_msg("encoder.round" + std::to_string(index) + ".upd_msg", {hidden, hidden}),
      upd_agg("encoder.round" + std::to_string(index) + ".upd_agg", {hidden, hidden}),
      upd_bias("encoder.round" + std::to_string(index) + ".upd_bias", {hidden}) {}

EncoderWeights::EncoderWeights(const EncoderConfig& config)
    : cfg(config),
      init_rbf("encoder.init_rbf", {config.hidden, config.rbf.count}),
      init_intensity("encoder.init_intensity", {config.hidden}),
      init_bias("encoder.init_bias", {config.hidden}),
      single_default("encoder.single_default", {config.hidden}),
      out_weight("encoder.out_weight", {config.out_dim, config.hidden}),
      out_bias("encoder.out_bias", {config.out_dim}) {
    cfg.validate();
    rounds.reserve(static_cast<std::size_t>(cfg.rounds));
    for (int l = 0; l < cfg.rounds; ++l) rounds.emplace_back(l, cfg.hidden, cfg.rbf.count);
}

void EncoderWeights::collect(ParamRefs& refs) {
    refs.push_back(&init_rbf);
    refs.push_back(&init_intensity);
    refs.push_back(&init_bias);
    refs.push_back(&single_default);
    for (Round& r : rounds) {
        refs.push_back(&r.agg_msg);
        refs.push_back(&r.agg_rbf);
        refs.push_back(&r.agg_bias);
        refs.push_back(&r.upd_msg);
        refs.push_back(&r.upd_agg);
        refs.push_back(&r.upd_bias);
    }
    refs.push_back(&out_weight);
    refs.push_back(&out_bias);
}

void EncoderWeights::init(CounterRng& rng) {
    const double h_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    const double k_std = 1.0 / std::sqrt(static_cast<double>(cfg.rbf.count));
    init_rbf.init_normal(rng, k_std);
    init_intensity.init_normal(rng, 0.5);
    single_default.init_normal(rng, h_std);
    for (Round& r : rounds) {
        r.agg_msg.init_normal(rng, h_std);
        r.agg_rbf.init_normal(rng, k_std);
        r.upd_msg.init_normal(rng, h_std);
        r.upd_agg.init_normal(rng, h_std);
    }
    out_weight.init_normal(rng, h_std);
}

PillarGrid pillarize(const PointCloud& cloud, const GridConfig& cfg, int max_points_per_pillar) {
    cfg.validate();
    if (max_points_per_pillar < 1) throw std::invalid_argument("pillarize: max_points_per_pillar must be >= 1");
    PillarGrid grid;
    grid.rows = cfg.grid_cells;
    grid.cols = cfg.grid_cells;
    grid.offsets.assign(cloud.size(), {0.0, 0.0});

    for (int idx = 0; idx < static_cast<int>(cloud.size()); ++idx) {
        const Point& p = cloud[static_cast<std::size_t>(idx)];
        if (p.x < cfg.x_min || p.y < cfg.y_min || p.z < cfg.z_min || p.z >= cfg.z_max) {
            ++grid.dropped;
            continue;
        }
        const int col = static_cast<int>(std::floor((p.x - cfg.x_min) / cfg.pillar_size));
        const int row = static_cast<int>(std::floor((p.y - cfg.y_min) / cfg.pillar_size));
        if (col < 0 || col >= grid.cols || row < 0 || row >= grid.rows) {
            ++grid.dropped;
            continue;
        }
        grid.cells[{row, col}].push_back(idx);
    }

    for (auto& [key, indices] : grid.cells) {
        const double cx = cfg.cell_center_x(key.second);
        const double cy = cfg.cell_center_y(key.first);
        if (static_cast<int>(indices.size()) > max_points_per_pillar) {
            std::stable_sort(indices.begin(), indices.end(), [&](int a, int b) {
                const Point& pa = cloud[static_cast<std::size_t>(a)];
                const Point& pb = cloud[static_cast<std::size_t>(b)];
                const double da = (pa.x - cx) * (pa.x - cx) + (pa.y - cy) * (pa.y - cy);
                const double db = (pb.x - cx) * (pb.x - cx) + (pb.y - cy) * (pb.y - cy);
                if (da != db) return da < db;
                return a < b;
            });
            grid.truncated += static_cast<int>(indices.size()) - max_points_per_pillar;
            indices.resize(static_cast<std::size_t>(max_points_per_pillar));
            std::sort(indices.begin(), indices.end());
        }
        for (int idx : indices) {
            const Point& p = cloud[static_cast<std::size_t>(idx)];
            grid.offsets[static_cast<std::size_t>(idx)] = {p.x - cx, p.y - cy};
        }
    }
    return grid;
}

std::vector<double> rbf_embed(double d, const RBFSpec& spec) {
    spec.validate();
    if (d < 0.0) throw std::invalid_argument("rbf_embed: distance must be nonnegative");
    std::vector<double> out(static_cast<std::size_t>(spec.count));
    for (int k = 0; k < spec.count; ++k) {
        const double delta = d - spec.center(k);
        out[static_cast<std::size_t>(k)] = std::exp(-spec.gamma * delta * delta);
    }
    return out;
}

namespace {

// Forward pass shared by the plain and taped entry points. `tape`, when
// non-null, captures phi and every message level.
std::vector<double> encode_impl(std::span<const Point> points, const EncoderWeights& w, PillarTape* tape) {
    const int H = w.cfg.hidden;
    const int n = static_cast<int>(points.size());
    if (n < 1) throw std::invalid_argument("encode_pillar: empty pillar");

    std::vector<Point> sorted(points.begin(), points.end());
    std::sort(sorted.begin(), sorted.end(), point_less);

    std::vector<double> feature(static_cast<std::size_t>(w.cfg.out_dim));
    for (int c = 0; c < w.cfg.out_dim; ++c) feature[static_cast<std::size_t>(c)] = w.out_bias.value.at(c);

    if (tape != nullptr) {
        tape->n = n;
        tape->points = sorted;
        tape->phi.clear();
        tape->levels.clear();
    }

    if (n == 1) {
        matvec_acc(w.out_weight.value, w.single_default.value.data(), feature.data());
        if (tape != nullptr) {
            const auto vals = w.single_default.value.values();
            tape->pooled.assign(vals.begin(), vals.end());
        }
        return feature;
    }

    const auto edge = [n](int j, int i) { return static_cast<std::size_t>(j * n + i); };
    const std::size_t nn = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);

    std::vector<std::vector<double>> phi(nn);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            if (j == i) continue;
            const Point& a = sorted[static_cast<std::size_t>(j)];
            const Point& b = sorted[static_cast<std::size_t>(i)];
            const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
            phi[edge(j, i)] = rbf_embed(std::sqrt(dx * dx + dy * dy + dz * dz), w.cfg.rbf);
        }

    std::vector<std::vector<double>> msg(nn);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            if (j == i) continue;
            std::vector<double> m(static_cast<std::size_t>(H));
            for (int h = 0; h < H; ++h) m[static_cast<std::size_t>(h)] = w.init_bias.value.at(h);
            matvec_acc(w.init_rbf.value, phi[edge(j, i)].data(), m.data());
            const double isum = sorted[static_cast<std::size_t>(j)].intensity + sorted[static_cast<std::size_t>(i)].intensity;
            for (int h = 0; h < H; ++h) m[static_cast<std::size_t>(h)] += w.init_intensity.value.at(h) * isum;
            msg[edge(j, i)] = std::move(m);
        }

    if (tape != nullptr) {
        tape->phi = phi;
        tape->levels.push_back(msg);
    }

    const double cnt = static_cast<double>(n - 2);
    std::vector<double> incoming(static_cast<std::size_t>(n) * H);
    std::vector<double> agg(static_cast<std::size_t>(H));
    std::vector<double> pre(static_cast<std::size_t>(H));
    for (const EncoderWeights::Round& round : w.rounds) {
        std::fill(incoming.begin(), incoming.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            double* sj = incoming.data() + static_cast<std::size_t>(j) * H;
            for (int z = 0; z < n; ++z) {
                if (z == j) continue;
                const double* m = msg[edge(z, j)].data();
                for (int h = 0; h < H; ++h) sj[h] += m[h];
            }
        }
        std::vector<std::vector<double>> next(nn);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                if (j == i) continue;
                const double* sj = incoming.data() + static_cast<std::size_t>(j) * H;
                const double* mij = msg[edge(i, j)].data();
                std::vector<double> rest(static_cast<std::size_t>(H));
                for (int h = 0; h < H; ++h) rest[static_cast<std::size_t>(h)] = sj[h] - mij[h];
                std::fill(agg.begin(), agg.end(), 0.0);
                matvec_acc(round.agg_msg.value, rest.data(), agg.data());
                if (cnt > 0.0) {
                    std::vector<double> basis(static_cast<std::size_t>(H));
                    for (int h = 0; h < H; ++h) basis[static_cast<std::size_t>(h)] = round.agg_bias.value.at(h);
                    matvec_acc(round.agg_rbf.value, phi[edge(j, i)].data(), basis.data());
                    for (int h = 0; h < H; ++h) agg[static_cast<std::size_t>(h)] += cnt * basis[static_cast<std::size_t>(h)];
                }
                for (int h = 0; h < H; ++h) pre[static_cast<std::size_t>(h)] = round.upd_bias.value.at(h);
                matvec_acc(round.upd_msg.value, msg[edge(j, i)].data(), pre.data());
                matvec_acc(round.upd_agg.value, agg.data(), pre.data());
                std::vector<double> m(static_cast<std::size_t>(H));
                for (int h = 0; h < H; ++h) m[static_cast<std::size_t>(h)] = std::tanh(pre[static_cast<std::size_t>(h)]);
                next[edge(j, i)] = std::move(m);
            }
        msg = std::move(next);
        if (tape != nullptr) tape->levels.push_back(msg);
    }

    std::vector<double> pooled(static_cast<std::size_t>(H), 0.0);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            if (j == i) continue;
            const double* m = msg[edge(j, i)].data();
            for (int h = 0; h < H; ++h) pooled[static_cast<std::size_t>(h)] += m[h];
        }
    matvec_acc(w.out_weight.value, pooled.data(), feature.data());
    if (tape != nullptr) tape->pooled = pooled;
    return feature;
}

}  // namespace

std::vector<double> encode_pillar(std::span<const Point> points, const EncoderWeights& w) {
    return encode_impl(points, w, nullptr);
}

std::vector<double> encode_pillar(std::span<const Point> points, const EncoderWeights& w, PillarTape& tape) {
    return encode_impl(points, w, &tape);
}

void encode_pillar_backward(const PillarTape& tape, EncoderWeights& w, std::span<const double> grad_feature) {
    const int H = w.cfg.hidden;
    if (static_cast<int>(grad_feature.size()) != w.cfg.out_dim)
        throw std::invalid_argument("encode_pillar_backward: bad gradient size");
    if (tape.n < 1) throw std::invalid_argument("encode_pillar_backward: empty tape");

    outer_acc(w.out_weight.grad, grad_feature.data(), tape.pooled.data());
    vec_acc(w.out_bias.grad, grad_feature.data());

    std::vector<double> g_pooled(static_cast<std::size_t>(H), 0.0);
    matvec_t_acc(w.out_weight.value, grad_feature.data(), g_pooled.data());

    if (tape.n == 1) {
        vec_acc(w.single_default.grad, g_pooled.data());
        return;
    }

    const int n = tape.n;
    const auto edge = [n](int j, int i) { return static_cast<std::size_t>(j * n + i); };
    const std::size_t nn = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
    const double cnt = static_cast<double>(n - 2);

    std::vector<std::vector<double>> g_msg(nn);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
            if (j != i) g_msg[edge(j, i)] = g_pooled;

    std::vector<double> incoming(static_cast<std::size_t>(n) * H);
    for (int l = static_cast<int>(w.rounds.size()) - 1; l >= 0; --l) {
        EncoderWeights::Round& round = w.rounds[static_cast<std::size_t>(l)];
        const auto& m_old = tape.levels[static_cast<std::size_t>(l)];
        const auto& m_new = tape.levels[static_cast<std::size_t>(l) + 1];

        std::fill(incoming.begin(), incoming.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            double* sj = incoming.data() + static_cast<std::size_t>(j) * H;
            for (int z = 0; z < n; ++z) {
                if (z == j) continue;
                const double* m = m_old[edge(z, j)].data();
                for (int h = 0; h < H; ++h) sj[h] += m[h];
            }
        }

        std::vector<std::vector<double>> g_old(nn);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i)
                if (j != i) g_old[edge(j, i)].assign(static_cast<std::size_t>(H), 0.0);
        std::vector<double> g_incoming(static_cast<std::size_t>(n) * H, 0.0);

        std::vector<double> g_pre(static_cast<std::size_t>(H));
        std::vector<double> g_agg(static_cast<std::size_t>(H));
        std::vector<double> rest(static_cast<std::size_t>(H));
        std::vector<double> agg(static_cast<std::size_t>(H));
        std::vector<double> t(static_cast<std::size_t>(H));
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                if (j == i) continue;
                const double* mn = m_new[edge(j, i)].data();
                const double* gm = g_msg[edge(j, i)].data();
                for (int h = 0; h < H; ++h) g_pre[static_cast<std::size_t>(h)] = gm[h] * (1.0 - mn[h] * mn[h]);

                const double* sj = incoming.data() + static_cast<std::size_t>(j) * H;
                const double* mij = m_old[edge(i, j)].data();
                for (int h = 0; h < H; ++h) rest[static_cast<std::size_t>(h)] = sj[h] - mij[h];
                std::fill(agg.begin(), agg.end(), 0.0);
                matvec_acc(round.agg_msg.value, rest.data(), agg.data());
                if (cnt > 0.0) {
                    std::vector<double> basis(static_cast<std::size_t>(H));
                    for (int h = 0; h < H; ++h) basis[static_cast<std::size_t>(h)] = round.agg_bias.value.at(h);
                    matvec_acc(round.agg_rbf.value, tape.phi[edge(j, i)].data(), basis.data());
                    for (int h = 0; h < H; ++h) agg[static_cast<std::size_t>(h)] += cnt * basis[static_cast<std::size_t>(h)];
                }

                vec_acc(round.upd_bias.grad, g_pre.data());
                outer_acc(round.upd_msg.grad, g_pre.data(), m_old[edge(j, i)].data());
                matvec_t_acc(round.upd_msg.value, g_pre.data(), g_old[edge(j, i)].data());
                outer_acc(round.upd_agg.grad, g_pre.data(), agg.data());
                std::fill(g_agg.begin(), g_agg.end(), 0.0);
                matvec_t_acc(round.upd_agg.value, g_pre.data(), g_agg.data());

                outer_acc(round.agg_msg.grad, g_agg.data(), rest.data());
                std::fill(t.begin(), t.end(), 0.0);
                matvec_t_acc(round.agg_msg.value, g_agg.data(), t.data());
                double* gsj = g_incoming.data() + static_cast<std::size_t>(j) * H;
                double* goij = g_old[edge(i, j)].data();
                for (int h = 0; h < H; ++h) {
                    gsj[h] += t[static_cast<std::size_t>(h)];
                    goij[h] -= t[static_cast<std::size_t>(h)];
                }
                if (cnt > 0.0) {
                    outer_acc(round.agg_rbf.grad, g_agg.data(), tape.phi[edge(j, i)].data(), cnt);
                    vec_acc(round.agg_bias.grad, g_agg.data(), cnt);
                }
            }

        for (int j = 0; j < n; ++j) {
            const double* gsj = g_incoming.data() + static_cast<std::size_t>(j) * H;
            for (int z = 0; z < n; ++z) {
                if (z == j) continue;
                double* g = g_old[edge(z, j)].data();
                for (int h = 0; h < H; ++h) g[h] += gsj[h];
            }
        }
        g_msg = std::move(g_old);
    }

    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            if (j == i) continue;
            const double* g = g_msg[edge(j, i)].data();
            outer_acc(w.init_rbf.grad, g, tape.phi[edge(j, i)].data());
            const double isum = tape.points[static_cast<std::size_t>(j)].intensity +
                                tape.points[static_cast<std::size_t>(i)].intensity;
            vec_acc(w.init_intensity.grad, g, isum);
            vec_acc(w.init_bias.grad, g);
        }
}

GridTensor scatter_to_bev(const std::map<CellKey, std::vector<double>>& features, const PillarGrid& grid,
                          const GridConfig& cfg, int out_dim) {
    if (grid.rows != cfg.grid_cells || grid.cols != cfg.grid_cells)
        throw std::invalid_argument("scatter_to_bev: grid does not match config");
    auto fit = features.begin();
    auto cit = grid.cells.begin();
    for (; fit != features.end() && cit != grid.cells.end(); ++fit, ++cit) {
        if (fit->first != cit->first) throw std::invalid_argument("scatter_to_bev: feature/cell key mismatch");
        if (static_cast<int>(fit->second.size()) != out_dim)
            throw std::invalid_argument("scatter_to_bev: feature length mismatch");
    }
    if (fit != features.end() || cit != grid.cells.end())
        throw std::invalid_argument("scatter_to_bev: feature/cell key mismatch");

    GridTensor bev(std::vector<int>{1, out_dim, grid.rows, grid.cols});
    for (const auto& [key, feat] : features) {
        const auto [row, col] = key;
        for (int c = 0; c < out_dim; ++c) bev.at(0, c, row, col) = feat[static_cast<std::size_t>(c)];
    }
    return bev;
}

CloudEncoding encode_cloud(const PointCloud& cloud, const EncoderWeights& w, const GridConfig& cfg, bool with_tapes) {
    CloudEncoding enc;
    enc.grid = pillarize(cloud, cfg, w.cfg.max_points_per_pillar);
    for (const auto& [key, indices] : enc.grid.cells) {
        std::vector<Point> pts;
        pts.reserve(indices.size());
        for (int idx : indices) pts.push_back(cloud[static_cast<std::size_t>(idx)]);
        if (with_tapes) {
            PillarTape tape;
            enc.features[key] = encode_pillar(pts, w, tape);
            enc.tapes[key] = std::move(tape);
        } else {
            enc.features[key] = encode_pillar(pts, w);
        }
    }
    enc.bev = scatter_to_bev(enc.features, enc.grid, cfg, w.cfg.out_dim);
    return enc;
}

void encode_cloud_backward(const CloudEncoding& enc, EncoderWeights& w, const GridTensor& grad_bev) {
    if (enc.tapes.size() != enc.features.size())
        throw std::invalid_argument("encode_cloud_backward: encoding was built without tapes");
    if (grad_bev.rank() != 4 || grad_bev.dim(0) != 1 || grad_bev.dim(1) != w.cfg.out_dim ||
        grad_bev.dim(2) != enc.grid.rows || grad_bev.dim(3) != enc.grid.cols)
        throw std::invalid_argument("encode_cloud_backward: gradient shape mismatch");
    std::vector<double> g(static_cast<std::size_t>(w.cfg.out_dim));
    for (const auto& [key, tape] : enc.tapes) {
        const auto [row, col] = key;
        for (int c = 0; c < w.cfg.out_dim; ++c) g[static_cast<std::size_t>(c)] = grad_bev.at(0, c, row, col);
        encode_pillar_backward(tape, w, g);
    }
}

}  // namespace eqdet
