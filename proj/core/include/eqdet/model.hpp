#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eqdet/backbone.hpp"
#include "eqdet/head.hpp"
#include "eqdet/pillars.hpp"
#include "eqdet/scene.hpp"

namespace eqdet {

struct ModelConfig {
    GridConfig grid;
    EncoderConfig encoder;
    BackboneConfig backbone;
    HeadConfig head;

    void validate() const;
};

/// The full pipeline: per-pillar relational encoder, C4-equivariant
/// backbone, center head.
struct Model {
    ModelConfig cfg;
    EncoderWeights encoder;
    BackboneWeights backbone;
    HeadWeights head;

    explicit Model(const ModelConfig& config);

    ParamRefs params();
    /// Parameters plus batch-norm running statistics; everything a
    /// checkpoint must carry.
    std::vector<std::pair<std::string, GridTensor*>> named_state();
    void init(std::uint64_t seed);
};

struct BatchTape {
    std::vector<CloudEncoding> enc;
    GridTensor x{std::vector<int>{1}};  // stacked BEV input [B, C, N, N]
    BackboneTape bb;
    HeadTape head;
};

HeadOutput model_forward(Model& m, const std::vector<const PointCloud*>& clouds, bool train,
                         BatchTape* tape = nullptr);
void model_backward(Model& m, const BatchTape& tape, const HeadOutputGrads& grads);

std::vector<OrientedBox> detect_cloud(Model& m, const PointCloud& cloud, int max_dets = 20,
                                      double score_thresh = 0.25);

/// Gradient descent with momentum: v <- mu v + g, p <- p - lr v.
struct Optimizer {
    double lr = 0.01;
    double momentum = 0.9;
    std::vector<GridTensor> velocity;

    void step(const ParamRefs& params);
};

/// One optimization step over a batch of scenes. Throws on a non-finite
/// loss with the per-term breakdown in the message.
LossTerms train_step(Model& m, const std::vector<Scene>& scenes, const std::vector<int>& batch, Optimizer& opt);

struct FitOptions {
    int steps = 600;
    int batch_size = 2;
    double lr = 0.01;
    double momentum = 0.9;
};

/// Round-robin batches over the scene list; returns every step's loss terms.
std::vector<LossTerms> fit(Model& m, const std::vector<Scene>& scenes, const FitOptions& opt);

}  // namespace eqdet
