#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "eqdet/backbone.hpp"
#include "eqdet/pillars.hpp"

namespace eqdet {

/// Normalize an angle into [-pi, pi).
inline double wrap_angle(double a) {
    const double two_pi = 2.0 * M_PI;
    return a - two_pi * std::floor((a + M_PI) / two_pi);
}

struct OrientedBox {
    double x = 0.0, y = 0.0, z = 0.0;
    double w = 1.0, l = 1.0, h = 1.0;
    double yaw = 0.0;
    int class_id = 0;
    double score = 1.0;
};

struct HeadConfig {
    int n_classes = 3;
    int trunk_channels = 32;
    int vector_hidden = 16;
    /// Ablation: plain planar trunk and plain 1x1 branches; trunk width
    /// doubles to keep the parameter budget comparable.
    bool plain = false;

    void validate() const;
    int trunk_width() const { return plain ? 2 * trunk_channels : trunk_channels; }
};

struct HeadOutput {
    GridTensor heatmap{std::vector<int>{1}};   // [B, n_classes, Y, X], after sigmoid
    GridTensor offset{std::vector<int>{1}};    // [B, 2, Y, X], (dx, dy) fractional cell units
    GridTensor size_log{std::vector<int>{1}};  // [B, 3, Y, X], log (w, l, h)
    GridTensor yaw_vec{std::vector<int>{1}};   // [B, 2, Y, X], (sin, cos)
    GridTensor z_center{std::vector<int>{1}};  // [B, 1, Y, X], meters
};

using HeadOutputGrads = HeadOutput;

/// Weights for the center head. The trunk is a lifting convolution plus a
/// group convolution so the head inherits exact C4 equivariance. Scalar
/// branches are shared per-slice 1x1 maps pooled over the group axis.
/// Vector-valued outputs (offset, yaw direction) cannot come from pooled
/// scalars: each uses a per-slice scored map q_s combined along the four
/// slice directions u(s) = (cos(-90 s), sin(-90 s)), which makes the decoded
/// vector rotate with the scene.
struct HeadWeights {
    HeadConfig cfg;
    int in_channels = 0;

    Param trunk1_kernel;  // lifting [Ct, C, K, K] (plain: conv [2Ct, C, K, K])
    Param trunk1_bias;
    Param trunk2_kernel;  // group [Ct, Ct, 4, K, K] (plain: conv)
    Param trunk2_bias;

    Param heatmap_w, heatmap_b;  // [ncls, Ct]
    Param size_w, size_b;        // [3, Ct]
    Param z_w, z_b;              // [1, Ct]

    // vector branches: hidden tanh layer then the direction-combined score
    Param offset_w1, offset_b1, offset_w2;
    Param yaw_w1, yaw_b1, yaw_w2;

    HeadWeights(const HeadConfig& config, int input_channels);
    void collect(ParamRefs& refs);
    void init(CounterRng& rng);
};

struct HeadTape {
    GridTensor bev{std::vector<int>{1}};
    GridTensor pre1{std::vector<int>{1}}, a1{std::vector<int>{1}};
    GridTensor pre2{std::vector<int>{1}}, trunk{std::vector<int>{1}};
    GridTensor hm{std::vector<int>{1}};  // post-sigmoid copy for the backward
    GridTensor offset_h{std::vector<int>{1}}, yaw_h{std::vector<int>{1}};
};

HeadOutput head_forward(const GridTensor& bev, HeadWeights& w, HeadTape* tape = nullptr);
GridTensor head_backward(const HeadTape& tape, HeadWeights& w, const HeadOutputGrads& grads);

struct TargetMaps {
    GridTensor heatmap{std::vector<int>{1}};
    GridTensor offset{std::vector<int>{1}};
    GridTensor size_log{std::vector<int>{1}};
    GridTensor yaw_vec{std::vector<int>{1}};
    GridTensor z_center{std::vector<int>{1}};
    GridTensor mask{std::vector<int>{1}};  // [B, 1, Y, X], 1.0 at ground-truth center cells
    int skipped = 0;                       // boxes outside the grid range
};

/// Render one scene's ground truth (batch index 0). Peaks are exact 1.0 at
/// the center cell with an isotropic Gaussian splat combined by max.
TargetMaps render_targets(const std::vector<OrientedBox>& gt, const GridConfig& cfg, int n_classes);
TargetMaps stack_targets(const std::vector<TargetMaps>& per_scene);

struct LossTerms {
    double total = 0.0;
    double heatmap = 0.0;
    double offset = 0.0;
    double size = 0.0;
    double yaw = 0.0;
    double z = 0.0;
    int foreground = 0;
};

/// Penalty-reduced focal loss on the heatmap plus masked L1 regression,
/// weights 1.0 / 0.25 per term, normalized by the foreground count.
LossTerms detection_loss(const HeadOutput& out, const TargetMaps& tgt);
HeadOutputGrads detection_loss_backward(const HeadOutput& out, const TargetMaps& tgt);

/// Strict 3x3 local maxima of the class heatmaps above the score threshold,
/// decoded into boxes; top max_dets by score, no further NMS. Cells tied with
/// a neighbour are not peaks, so constant plateaus decode to nothing (scan
/// order must never decide between equal scores; see the rotation audit).
std::vector<OrientedBox> decode(const HeadOutput& out, const GridConfig& cfg, int max_dets = 20,
                                double score_thresh = 0.25);

}  // namespace eqdet
