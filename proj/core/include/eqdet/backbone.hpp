#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "eqdet/conv.hpp"
#include "eqdet/group.hpp"
#include "eqdet/params.hpp"
#include "eqdet/tensor.hpp"

namespace eqdet {

/// Feature map on P4: [B, C, S=4, Y, X] with Y == X.
using LiftedFeature = GridTensor;

void check_lifted(const GridTensor& x);

/// Batch norm with statistics pooled over batch, group, and spatial axes
/// jointly; one mean/variance per channel. Per-(channel, group) statistics
/// would break the rotation commuting diagram, so the state only ever holds
/// per-channel vectors.
struct BNState {
    Param gamma;
    Param shift;
    GridTensor running_mean;
    GridTensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BNState(const std::string& name, int channels);
    int channels() const { return gamma.value.dim(0); }
    void collect(ParamRefs& refs) {
        refs.push_back(&gamma);
        refs.push_back(&shift);
    }
};

struct BNTape {
    GridTensor xhat{std::vector<int>{1}};
    std::vector<double> inv_std;
    bool train = false;
};

/// Lift a planar map onto P4: slice s is the convolution with the base
/// kernel rotated by s quarter turns.
GridTensor lifting_conv(const GridTensor& x, const GridTensor& base_kernel, const ConvSpec& spec);
void lifting_conv_backward(const GridTensor& x, const GridTensor& base_kernel, const ConvSpec& spec,
                           const GridTensor& grad_out, GridTensor* grad_x, GridTensor* grad_kernel);

/// Convolution over P4. kernel: [C', C, 4, K, K]; slice s of the output sums
/// conv2d(x[:, c, s'], rotate_kernel(kernel[c', c, (s'-s) mod 4], s)).
GridTensor group_conv(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec);
void group_conv_backward(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec,
                         const GridTensor& grad_out, GridTensor* grad_x, GridTensor* grad_kernel);

/// Adjoint of group_conv: maps [B, C', 4, Y, X] back to [B, C, 4, Y', X'].
GridTensor group_conv_transpose(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec);
void group_conv_transpose_backward(const GridTensor& x, const GridTensor& kernel, const ConvSpec& spec,
                                   const GridTensor& grad_out, GridTensor* grad_x, GridTensor* grad_kernel);

/// Works on [B, C, ...]: any layout with channels on axis 1; statistics pool
/// every other axis. Train mode updates running stats and requires at least
/// two pooled samples.
GridTensor equivariant_batch_norm(const GridTensor& x, BNState& state, bool train, BNTape* tape = nullptr);
GridTensor batch_norm_backward(const BNTape& tape, BNState& state, const GridTensor& grad_out);

GridTensor relu(const GridTensor& x);
GridTensor relu_backward(const GridTensor& pre, const GridTensor& grad_out);

enum class GroupPoolMode { kMax, kMean };

/// Reduce the group axis of [B, C, 4, Y, X] to a planar [B, C, Y, X] map.
GridTensor group_pool(const GridTensor& x, GroupPoolMode mode = GroupPoolMode::kMax,
                      std::vector<std::uint8_t>* argmax = nullptr);
GridTensor group_pool_backward(const GridTensor& grad_out, GroupPoolMode mode,
                               const std::vector<std::uint8_t>& argmax);

/// 2x2 average pooling / nearest-neighbor unpooling on the trailing two
/// axes. Both commute exactly with the C4 action on even extents, which is
/// how the backbone changes resolution without breaking equivariance
/// (stride-2 convolution with an odd kernel cannot produce an even-to-even
/// size map, so it is unusable on divisible-by-4 grids).
GridTensor avg_pool2(const GridTensor& x);
GridTensor avg_pool2_backward(const GridTensor& grad_out, const std::vector<int>& in_shape);
GridTensor unpool2(const GridTensor& x);
GridTensor unpool2_backward(const GridTensor& grad_out, const std::vector<int>& in_shape);

/// Concatenate [B, C_i, (S,) Y, X] tensors along the channel axis.
GridTensor concat_channels(const std::vector<const GridTensor*>& xs);
std::vector<GridTensor> split_channels(const GridTensor& x, const std::vector<int>& widths);

struct BackboneConfig {
    std::array<int, 3> widths{32, 64, 128};
    int kernel_size = 3;
    /// Ablation: replace lifting/group convolutions by standard planar
    /// convolutions; widths double so per-stage parameter counts match the
    /// group-convolution stack.
    bool plain = false;
    bool mean_pool = false;

    void validate() const;
    int stage_width(int i) const { return plain ? 2 * widths[static_cast<std::size_t>(i)] : widths[static_cast<std::size_t>(i)]; }
    int out_channels() const { return stage_width(0) + stage_width(1) + stage_width(2); }
};

struct BackboneWeights {
    BackboneConfig cfg;
    int in_channels = 0;

    struct Block {
        Param kernel;
        BNState bn;
        Block(const std::string& name, std::vector<int> kernel_shape, int bn_channels)
            : kernel(name + ".kernel", std::move(kernel_shape)), bn(name + ".bn", bn_channels) {}
    };
    // lift, stage1, stage2, stage3, up2, up3
    std::vector<Block> blocks;

    BackboneWeights(const BackboneConfig& config, int input_channels);
    void collect(ParamRefs& refs);
    void init(CounterRng& rng);
};

struct BackboneTape {
    GridTensor x_in{std::vector<int>{1}};
    std::vector<GridTensor> conv_in;   // input to each block's conv
    std::vector<GridTensor> pre_relu;  // each block's BN output
    std::vector<BNTape> bn;
    std::vector<GridTensor> stage_out;  // post-ReLU S1, S2, S3
    std::vector<std::uint8_t> pool_argmax;
    std::vector<int> cat_shape;
};

/// Full stack: lift, stride-1 stage, two pooled stages, transposed-conv up
/// paths, channel concatenation, group pooling. Output [B, ΣC_i, Y, X].
GridTensor backbone_forward(const GridTensor& x, BackboneWeights& w, bool train, BackboneTape* tape = nullptr);
GridTensor backbone_backward(const BackboneTape& tape, BackboneWeights& w, const GridTensor& grad_out);

}  // namespace eqdet
