#include "eqdet/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace eqdet {

void ModelConfig::validate() const {
    grid.validate();
    encoder.validate();
    backbone.validate();
    head.validate();
    if (grid.grid_cells % 4 != 0)
        throw std::invalid_argument("ModelConfig: grid extent must be divisible by 4 for the backbone");
}

Model::Model(const ModelConfig& config)
    : cfg(config),
      encoder(config.encoder),
      backbone(config.backbone, config.encoder.out_dim),
      head(config.head, config.backbone.out_channels()) {
    cfg.validate();
}

ParamRefs Model::params() {
    ParamRefs refs;
    encoder.collect(refs);
    backbone.collect(refs);
    head.collect(refs);
    return refs;
}

std::vector<std::pair<std::string, GridTensor*>> Model::named_state() {
    std::vector<std::pair<std::string, GridTensor*>> state;
    for (Param* p : params()) state.emplace_back(p->name, &p->value);
    for (BackboneWeights::Block& block : backbone.blocks) {
        const std::string& g = block.bn.gamma.name;  // "<prefix>.gamma"
        const std::string prefix = g.substr(0, g.size() - 6);
        state.emplace_back(prefix + ".running_mean", &block.bn.running_mean);
        state.emplace_back(prefix + ".running_var", &block.bn.running_var);
    }
    return state;
}

void Model::init(std::uint64_t seed) {
    CounterRng rng(seed);
    encoder.init(rng);
    backbone.init(rng);
    head.init(rng);
}

HeadOutput model_forward(Model& m, const std::vector<const PointCloud*>& clouds, bool train, BatchTape* tape) {
    if (clouds.empty()) throw std::invalid_argument("model_forward: empty batch");
    const int b_n = static_cast<int>(clouds.size());
    const int c_n = m.cfg.encoder.out_dim;
    const int n = m.cfg.grid.grid_cells;

    std::vector<CloudEncoding> encodings;
    encodings.reserve(clouds.size());
    for (const PointCloud* cloud : clouds)
        encodings.push_back(encode_cloud(*cloud, m.encoder, m.cfg.grid, tape != nullptr));

    GridTensor x({b_n, c_n, n, n});
    const std::int64_t block = static_cast<std::int64_t>(c_n) * n * n;
    for (int b = 0; b < b_n; ++b)
        std::copy(encodings[static_cast<std::size_t>(b)].bev.data(),
                  encodings[static_cast<std::size_t>(b)].bev.data() + block,
                  x.data() + static_cast<std::int64_t>(b) * block);

    GridTensor feat = backbone_forward(x, m.backbone, train, tape != nullptr ? &tape->bb : nullptr);
    HeadOutput out = head_forward(feat, m.head, tape != nullptr ? &tape->head : nullptr);
    if (tape != nullptr) {
        tape->enc = std::move(encodings);
        tape->x = std::move(x);
    }
    return out;
}

void model_backward(Model& m, const BatchTape& tape, const HeadOutputGrads& grads) {
    const GridTensor g_feat = head_backward(tape.head, m.head, grads);
    const GridTensor g_x = backbone_backward(tape.bb, m.backbone, g_feat);

    const int b_n = g_x.dim(0);
    const int c_n = g_x.dim(1), n = g_x.dim(2);
    const std::int64_t block = static_cast<std::int64_t>(c_n) * n * n;
    for (int b = 0; b < b_n; ++b) {
        GridTensor slice({1, c_n, n, n});
        std::copy(g_x.data() + static_cast<std::int64_t>(b) * block,
                  g_x.data() + static_cast<std::int64_t>(b + 1) * block, slice.data());
        encode_cloud_backward(tape.enc[static_cast<std::size_t>(b)], m.encoder, slice);
    }
}

std::vector<OrientedBox> detect_cloud(Model& m, const PointCloud& cloud, int max_dets, double score_thresh) {
    const HeadOutput out = model_forward(m, {&cloud}, false, nullptr);
    return decode(out, m.cfg.grid, max_dets, score_thresh);
}

void Optimizer::step(const ParamRefs& params) {
    if (velocity.size() != params.size()) {
        velocity.clear();
        velocity.reserve(params.size());
        for (const Param* p : params) velocity.emplace_back(p->value.shape());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        GridTensor& v = velocity[i];
        Param& p = *params[i];
        if (!v.same_shape(p.value)) throw std::invalid_argument("Optimizer: parameter shape changed");
        for (std::int64_t j = 0; j < v.numel(); ++j) {
            v.data()[j] = momentum * v.data()[j] + p.grad.data()[j];
            p.value.data()[j] -= lr * v.data()[j];
        }
    }
}

LossTerms train_step(Model& m, const std::vector<Scene>& scenes, const std::vector<int>& batch, Optimizer& opt) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");

    ParamRefs params = m.params();
    zero_grads(params);

    std::vector<const PointCloud*> clouds;
    std::vector<TargetMaps> targets;
    clouds.reserve(batch.size());
    targets.reserve(batch.size());
    for (int idx : batch) {
        const Scene& s = scenes.at(static_cast<std::size_t>(idx));
        clouds.push_back(&s.cloud);
        targets.push_back(render_targets(s.gt, m.cfg.grid, m.cfg.head.n_classes));
    }
    const TargetMaps tgt = stack_targets(targets);

    BatchTape tape;
    const HeadOutput out = model_forward(m, clouds, true, &tape);
    const LossTerms loss = detection_loss(out, tgt);
    if (!std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg << "train_step: non-finite loss (heatmap " << loss.heatmap << ", offset " << loss.offset << ", size "
            << loss.size << ", yaw " << loss.yaw << ", z " << loss.z << ")";
        throw std::runtime_error(msg.str());
    }

    model_backward(m, tape, detection_loss_backward(out, tgt));
    opt.step(params);
    return loss;
}

std::vector<LossTerms> fit(Model& m, const std::vector<Scene>& scenes, const FitOptions& opt) {
    if (scenes.empty()) throw std::invalid_argument("fit: no scenes");
    if (opt.steps < 0 || opt.batch_size < 1) throw std::invalid_argument("fit: bad step or batch size");

    Optimizer sgd;
    sgd.lr = opt.lr;
    sgd.momentum = opt.momentum;

    const int n = static_cast<int>(scenes.size());
    std::vector<LossTerms> log;
    log.reserve(static_cast<std::size_t>(opt.steps));
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<int> batch(static_cast<std::size_t>(opt.batch_size));
        for (int i = 0; i < opt.batch_size; ++i)
            batch[static_cast<std::size_t>(i)] = (step * opt.batch_size + i) % n;
        log.push_back(train_step(m, scenes, batch, sgd));
    }
    return log;
}

}  // namespace eqdet
