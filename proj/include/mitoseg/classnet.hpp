#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mitoseg/image.hpp"
#include "mitoseg/layers.hpp"

namespace mitoseg {

struct ClassConfig {
    std::vector<int> stage_depths{3, 4, 6, 3};  // 34-layer pattern
    int base_width = 16;
    int input_size = 128;
    bool use_batchnorm = true;
    std::uint64_t init_seed = 4321;

    static ClassConfig desk_profile() {
        ClassConfig c;
        c.stage_depths = {1, 1, 1, 1};
        c.base_width = 16;
        return c;
    }
};

// Standard basic residual block: two 3x3 convolutions plus shortcut,
// stride-2 with a 1x1 projection at stage transitions.
struct BasicBlock {
    Conv2dLayer c1, c2;
    BatchNormLayer b1, b2;
    std::optional<Conv2dLayer> proj;
    std::optional<BatchNormLayer> bproj;

    static BasicBlock make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, int stride,
                           bool bn, Rng& rng) {
        BasicBlock b;
        b.c1 = Conv2dLayer::make(reg, name + ".conv1", in_ch, out_ch, 3, stride, !bn, rng);
        b.b1 = BatchNormLayer::make(reg, name + ".bn1", out_ch, bn);
        b.c2 = Conv2dLayer::make(reg, name + ".conv2", out_ch, out_ch, 3, 1, !bn, rng);
        b.b2 = BatchNormLayer::make(reg, name + ".bn2", out_ch, bn);
        if (stride != 1 || in_ch != out_ch) {
            b.proj = Conv2dLayer::make(reg, name + ".proj", in_ch, out_ch, 1, stride, !bn, rng);
            b.bproj = BatchNormLayer::make(reg, name + ".bnproj", out_ch, bn);
        }
        return b;
    }

    Tensor forward(const Tensor& x, bool training) {
        Tensor main = relu(b1.forward(c1.forward(x), training));
        main = b2.forward(c2.forward(main), training);
        Tensor sc = proj ? bproj->forward(proj->forward(x), training) : x;
        return relu(add(main, sc));
    }
};

struct ClassModel {
    ClassConfig cfg;
    ParamRegistry reg;
    bool training = false;

    Conv2dLayer stem;
    BatchNormLayer bn_stem;
    std::vector<BasicBlock> blocks;
    LinearLayer fc;
    int feature_width = 0;

    void set_train(bool t) { training = t; }

    // N x 3 x 128 x 128 -> N probabilities
    Tensor forward(const Tensor& x) {
        require_shape(x.ndim() == 4 && x.dim(1) == 3 && x.dim(2) == cfg.input_size && x.dim(3) == cfg.input_size,
                      "classifier expects Nx3x" + std::to_string(cfg.input_size) + "x" +
                          std::to_string(cfg.input_size) + " input, got " + shape_str(x.shape()));
        Tensor h = relu(bn_stem.forward(stem.forward(x), training));
        for (auto& b : blocks) h = b.forward(h, training);
        Tensor pooled = reshape(pooled_reduction(h, Reduce::global_avg), {x.dim(0), feature_width});
        return reshape(sigmoid(fc.forward(pooled)), {x.dim(0)});
    }
};

inline ClassModel build_classifier(const ClassConfig& cfg) {
    if (cfg.stage_depths.size() != 4) throw ConfigError("classifier expects exactly four stage depths");
    for (int d : cfg.stage_depths)
        if (d < 1) throw ConfigError("classifier stage depths must be >= 1");
    if (cfg.input_size != 128) throw ConfigError("classifier input size is fixed at 128");

    ClassModel m;
    m.cfg = cfg;
    Rng rng(cfg.init_seed);
    const bool bn = cfg.use_batchnorm;
    const int b = cfg.base_width;
    m.stem = Conv2dLayer::make(m.reg, "stem.conv", 3, b, 3, 1, !bn, rng);
    m.bn_stem = BatchNormLayer::make(m.reg, "stem.bn", b, bn);
    int in_ch = b;
    for (int stage = 0; stage < 4; ++stage) {
        const int out_ch = b << stage;
        for (int i = 0; i < cfg.stage_depths[static_cast<std::size_t>(stage)]; ++i) {
            const int stride = (stage > 0 && i == 0) ? 2 : 1;
            const std::string name =
                "stage" + std::to_string(stage + 1) + ".block" + std::to_string(i + 1);
            m.blocks.push_back(BasicBlock::make(m.reg, name, in_ch, out_ch, stride, bn, rng));
            in_ch = out_ch;
        }
    }
    m.feature_width = in_ch;
    m.fc = LinearLayer::make(m.reg, "fc", in_ch, 1, rng);
    return m;
}

struct ClassifyResult {
    bool ok = false;
    double probability = 0.0;
    std::string error;
};

// Resize crops to the fixed input extent, scale to [0,1] and run the
// classifier in eval mode. Per-sample failures (empty crops) are reported
// inline; the batch continues.
inline std::vector<ClassifyResult> classify_candidates(ClassModel& model, const std::vector<ImageU8>& crops,
                                                       int batch_size = 32) {
    NoGradGuard inference;
    std::vector<ClassifyResult> results(crops.size());
    std::vector<int> live;
    for (std::size_t i = 0; i < crops.size(); ++i) {
        if (crops[i].empty()) {
            results[i].error = "empty crop (zero extent)";
        } else if (crops[i].channels != 3) {
            results[i].error = "candidate crop must be RGB";
        } else {
            live.push_back(static_cast<int>(i));
        }
    }
    const int S = model.cfg.input_size;
    for (std::size_t start = 0; start < live.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(live.size(), start + static_cast<std::size_t>(batch_size));
        const int n = static_cast<int>(end - start);
        Tensor batch = Tensor::zeros({n, 3, S, S});
        auto bd = batch.data();
        const std::size_t plane = static_cast<std::size_t>(S) * S;
        for (int j = 0; j < n; ++j) {
            ImageU8 rs = resize_bilinear(crops[static_cast<std::size_t>(live[start + static_cast<std::size_t>(j)])], S, S);
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    for (int c = 0; c < 3; ++c)
                        bd[(static_cast<std::size_t>(j) * 3 + static_cast<std::size_t>(c)) * plane +
                           static_cast<std::size_t>(y) * S + x] = static_cast<float>(rs.at(y, x, c)) / 255.0f;
        }
        const bool was_training = model.training;
        model.training = false;
        Tensor probs = model.forward(batch);
        model.training = was_training;
        for (int j = 0; j < n; ++j) {
            auto& r = results[static_cast<std::size_t>(live[start + static_cast<std::size_t>(j)])];
            r.ok = true;
            r.probability = probs.data()[static_cast<std::size_t>(j)];
        }
    }
    return results;
}

}  // namespace mitoseg
