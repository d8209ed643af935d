#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "eqdet/params.hpp"
#include "eqdet/tensor.hpp"

namespace eqdet {

struct Point {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double intensity = 0.0;
};

using PointCloud = std::vector<Point>;

/// Bird's-eye-view grid geometry. Cells are square pillars spanning the full
/// z range; cell (row, col) covers [y_min + row*s, y_min + (row+1)*s) x
/// [x_min + col*s, x_min + (col+1)*s) with s = pillar_size.
struct GridConfig {
    double x_min = -8.0;
    double x_max = 8.0;
    double y_min = -8.0;
    double y_max = 8.0;
    double z_min = -3.0;
    double z_max = 3.0;
    double pillar_size = 0.25;
    int grid_cells = 64;

    void validate() const;
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }
    double cell_center_x(int col) const { return x_min + (col + 0.5) * pillar_size; }
    double cell_center_y(int row) const { return y_min + (row + 0.5) * pillar_size; }
};

using CellKey = std::pair<int, int>;  // (row, col)

/// Occupancy index of a point cloud: which retained points fall in which
/// pillar, plus each point's planar offset from its pillar center.
struct PillarGrid {
    int rows = 0;
    int cols = 0;
    /// Ordered so iteration is row-major deterministic.
    std::map<CellKey, std::vector<int>> cells;
    /// (dx, dy) from the pillar center, indexed like `cloud`; meaningful only
    /// for retained points.
    std::vector<std::array<double, 2>> offsets;
    int dropped = 0;    // out-of-range points
    int truncated = 0;  // points removed by the per-pillar cap
};

struct RBFSpec {
    int count = 8;
    double d_max = 4.0;
    double gamma = 1.5;

    void validate() const;
    double center(int k) const { return d_max * static_cast<double>(k) / static_cast<double>(count - 1); }
};

struct EncoderConfig {
    int hidden = 16;
    int rounds = 2;
    int out_dim = 32;
    int max_points_per_pillar = 16;
    RBFSpec rbf;

    void validate() const;
};

/// Weights of the per-pillar relational encoder. Messages live on directed
/// point pairs; every map below is built only from pairwise distances and
/// intensities, so the pillar feature is invariant to rigid planar motion of
/// the points and to their input order.
struct EncoderWeights {
    EncoderConfig cfg;

    Param init_rbf;        // [H, K]
    Param init_intensity;  // [H]
    Param init_bias;       // [H]
    Param single_default;  // [H] stand-in message for one-point pillars

    struct Round {
        Param agg_msg;   // [H, H]
        Param agg_rbf;   // [H, K]
        Param agg_bias;  // [H]
        Param upd_msg;   // [H, H]
        Param upd_agg;   // [H, H]
        Param upd_bias;  // [H]

        explicit Round(int index, int hidden, int rbf_count);
    };
    std::vector<Round> rounds;

    Param out_weight;  // [out_dim, H]
    Param out_bias;    // [out_dim]

    explicit EncoderWeights(const EncoderConfig& config);
    void collect(ParamRefs& refs);
    void init(CounterRng& rng);
};

/// Everything needed to replay one pillar's encoding backwards.
struct PillarTape {
    int n = 0;                             // points after sorting/capping
    std::vector<Point> points;             // canonical order
    std::vector<std::vector<double>> phi;  // [n*n][K], diagonal unused
    /// Messages after each round: levels[0] is the init map, levels[l+1] the
    /// output of round l. Each level is [n*n][H] with the diagonal unused.
    std::vector<std::vector<std::vector<double>>> levels;
    std::vector<double> pooled;  // [H] sum of final messages
};

PillarGrid pillarize(const PointCloud& cloud, const GridConfig& cfg, int max_points_per_pillar = 16);

/// Gaussian radial basis embedding of a nonnegative distance.
std::vector<double> rbf_embed(double d, const RBFSpec& spec);

std::vector<double> encode_pillar(std::span<const Point> points, const EncoderWeights& w);
std::vector<double> encode_pillar(std::span<const Point> points, const EncoderWeights& w, PillarTape& tape);

/// Accumulates parameter gradients for one pillar given d(loss)/d(feature).
void encode_pillar_backward(const PillarTape& tape, EncoderWeights& w, std::span<const double> grad_feature);

/// Dense [1, out_dim, rows, cols] map; empty cells are zero. The feature keys
/// must match the occupied cells exactly.
GridTensor scatter_to_bev(const std::map<CellKey, std::vector<double>>& features, const PillarGrid& grid,
                          const GridConfig& cfg, int out_dim);

struct CloudEncoding {
    PillarGrid grid;
    std::map<CellKey, std::vector<double>> features;
    std::map<CellKey, PillarTape> tapes;  // filled only when with_tapes
    GridTensor bev{std::vector<int>{1, 1, 1, 1}};
};

CloudEncoding encode_cloud(const PointCloud& cloud, const EncoderWeights& w, const GridConfig& cfg,
                           bool with_tapes = false);

/// Routes d(loss)/d(bev map) back into encoder weight gradients.
void encode_cloud_backward(const CloudEncoding& enc, EncoderWeights& w, const GridTensor& grad_bev);

}  // namespace eqdet
