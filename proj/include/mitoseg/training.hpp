#pragma once

#include <iostream>
#include <optional>
#include <sstream>

#include "mitoseg/dataset.hpp"
#include "mitoseg/losses.hpp"
#include "mitoseg/optim.hpp"
#include "mitoseg/patches.hpp"
#include "mitoseg/two_stage.hpp"

namespace mitoseg {

struct TrainHyper {
    double lr = 1e-4;
    int batch = 16;
    double decay_ratio = 0.1;         // LR multiplier applied once at 80% of the run
    bool decay_as_weight_decay = false;  // alternative reading: AdamW weight decay = decay_ratio
    double weight_decay = 0.01;
    int epochs = 10;
    int max_steps = 0;  // 0: no cap
    std::uint64_t seed = 1;
    int patch = 256;
    int random_per_image = 2;
    int centered_per_centroid = 2;
    double match_radius = 20.0;  // candidate labeling for the classifier
    bool augment = true;
    CombinedLossConfig loss;
};

struct TrainResult {
    std::vector<float> loss_log;
    int steps = 0;
    double final_lr = 0.0;
};

namespace detail {

struct PatchRef {
    int image_index;
    int x0, y0;
};

inline void log_line(std::ostream* log, const std::string& s) {
    if (log) (*log) << s << "\n";
}

}  // namespace detail

// Segmentation training: deterministic patch pool (mitosis-centered plus
// random), seeded shuffling and augmentation, AdamW on the combined loss.
inline TrainResult train_segmentation(SegModel& model, const Dataset& data, const TrainHyper& hyper,
                                      const std::string& checkpoint_path, std::ostream* log = nullptr) {
    if (data.items.empty()) throw DataError("training dataset is empty");
    for (const auto& item : data.items)
        if (item.mask.empty()) throw DataError("segmentation training needs masks; missing for " + item.id);

    Rng rng(hyper.seed);
    std::vector<detail::PatchRef> pool;
    for (std::size_t i = 0; i < data.items.size(); ++i) {
        const auto& item = data.items[i];
        PatchOptions opt;
        opt.patch = hyper.patch;
        const int max_x = item.image.width - hyper.patch;
        const int max_y = item.image.height - hyper.patch;
        if (max_x < 0 || max_y < 0)
            throw ConfigError("patch " + std::to_string(hyper.patch) + " exceeds image " + item.id);
        for (const auto& c : item.centroids)
            for (int k = 0; k < hyper.centered_per_centroid; ++k) {
                int x = static_cast<int>(std::lround(c.x)) + rng.uniform_int(-16, 16) - hyper.patch / 2;
                int y = static_cast<int>(std::lround(c.y)) + rng.uniform_int(-16, 16) - hyper.patch / 2;
                pool.push_back({static_cast<int>(i), std::clamp(x, 0, max_x), std::clamp(y, 0, max_y)});
            }
        for (int k = 0; k < hyper.random_per_image; ++k)
            pool.push_back({static_cast<int>(i), max_x ? rng.uniform_int(0, max_x) : 0,
                            max_y ? rng.uniform_int(0, max_y) : 0});
    }
    if (pool.empty()) throw DataError("patch pool is empty; no centroids and random_per_image = 0");

    const int batch = std::min<int>(hyper.batch, static_cast<int>(pool.size()));
    const int steps_per_epoch = std::max<int>(1, static_cast<int>(pool.size()) / batch);
    int total_steps = hyper.epochs * steps_per_epoch;
    if (hyper.max_steps > 0) total_steps = std::min(total_steps, hyper.max_steps);
    const int decay_step = std::max(1, static_cast<int>(0.8 * total_steps));

    AdamWConfig ocfg;
    ocfg.lr = hyper.lr;
    ocfg.weight_decay = hyper.decay_as_weight_decay ? hyper.decay_ratio : hyper.weight_decay;
    AdamW opt(ocfg);
    auto params = model.reg.trainable();
    model.set_train(true);

    TrainResult res;
    int step = 0;
    for (int epoch = 0; epoch < hyper.epochs && step < total_steps; ++epoch) {
        std::vector<int> order(pool.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (int b = 0; b < steps_per_epoch && step < total_steps; ++b) {
            Tensor x = Tensor::zeros({batch, 3, hyper.patch, hyper.patch});
            Tensor t = Tensor::zeros({batch, 1, hyper.patch, hyper.patch});
            const std::size_t iplane = 3u * static_cast<std::size_t>(hyper.patch) * hyper.patch;
            const std::size_t mplane = static_cast<std::size_t>(hyper.patch) * hyper.patch;
            for (int s = 0; s < batch; ++s) {
                const auto& ref = pool[static_cast<std::size_t>(order[static_cast<std::size_t>(b * batch + s)])];
                const auto& item = data.items[static_cast<std::size_t>(ref.image_index)];
                PatchPair pp = detail::crop_pair(item.image, item.mask, ref.x0, ref.y0, hyper.patch);
                if (hyper.augment)
                    pp = augment_patch(pp, hyper.seed * 2654435761ull + static_cast<std::uint64_t>(step) * 977 +
                                               static_cast<std::uint64_t>(s));
                for (int c = 0; c < 3; ++c)
                    for (int yy = 0; yy < hyper.patch; ++yy)
                        for (int xx = 0; xx < hyper.patch; ++xx)
                            x.data()[s * iplane + (static_cast<std::size_t>(c) * hyper.patch + yy) * hyper.patch + xx] =
                                pp.image.at(yy, xx, c) / 255.0f;
                for (std::size_t j = 0; j < mplane; ++j)
                    t.data()[s * mplane + j] = pp.mask.pixels[j] > 127 ? 1.0f : 0.0f;
            }
            model.reg.zero_grad();
            Tensor loss = combined_loss(model.forward(x), t, hyper.loss);
            const float lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericError("non-finite training loss at step " + std::to_string(step) +
                                   " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ")");
            backward(loss);
            opt.step(params);
            ++step;
            if (!hyper.decay_as_weight_decay && step == decay_step) opt.config().lr *= hyper.decay_ratio;
            res.loss_log.push_back(lv);
            {
                std::ostringstream os;
                os.precision(6);
                os << "train-seg step=" << step << " epoch=" << epoch << " loss=" << lv
                   << " lr=" << opt.config().lr;
                detail::log_line(log, os.str());
            }
        }
    }
    res.steps = step;
    res.final_lr = opt.config().lr;
    model.set_train(false);
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model.reg);
    return res;
}

// Candidate set for classifier training: stage-1 regions of each image,
// labeled positive when their centroid matches a ground-truth centroid.
struct LabeledCandidates {
    std::vector<ImageU8> crops;
    std::vector<float> labels;
    int positives = 0;
};

inline LabeledCandidates collect_candidates(SegModel& seg, const Dataset& data, const TwoStageOptions& opt,
                                            double match_radius) {
    LabeledCandidates out;
    for (const auto& item : data.items) {
        Tensor prob = segment_image(seg, item.image, opt.window, opt.max_auto_window);
        auto regions = label_regions(prob, opt.seg_threshold);
        auto cands = extract_candidates(item.image, regions, opt.min_area, opt.crop_size);
        std::vector<DetectionPoint> pts;
        pts.reserve(cands.size());
        for (const auto& c : cands) pts.push_back({c.region.cx, c.region.cy, 0.0, c.region.area});
        auto match = match_detections(pts, item.centroids, match_radius);
        std::vector<char> is_pos(cands.size(), 0);
        for (const auto& [pi, gi] : match.pairs) is_pos[static_cast<std::size_t>(pi)] = 1;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            out.crops.push_back(cands[i].crop);
            out.labels.push_back(is_pos[i] ? 1.0f : 0.0f);
            out.positives += is_pos[i];
        }
    }
    return out;
}

// Classifier training over stage-1 candidates with BCE.
inline TrainResult train_classifier(ClassModel& model, SegModel& seg, const Dataset& data,
                                    const TrainHyper& hyper, const TwoStageOptions& seg_opt,
                                    const std::string& checkpoint_path, std::ostream* log = nullptr) {
    if (data.items.empty()) throw DataError("training dataset is empty");
    LabeledCandidates cands = collect_candidates(seg, data, seg_opt, hyper.match_radius);
    if (cands.crops.empty()) throw DataError("stage-1 produced no candidates to train the classifier on");
    if (cands.positives == 0)
        throw DataError("no positive candidates under the matcher radius; classifier labels are one-sided");
    {
        std::ostringstream os;
        os << "train-class candidates=" << cands.crops.size() << " positives=" << cands.positives;
        detail::log_line(log, os.str());
    }

    const int S = model.cfg.input_size;
    const int batch = std::min<int>(hyper.batch, static_cast<int>(cands.crops.size()));
    const int steps_per_epoch = std::max<int>(1, static_cast<int>(cands.crops.size()) / batch);
    int total_steps = hyper.epochs * steps_per_epoch;
    if (hyper.max_steps > 0) total_steps = std::min(total_steps, hyper.max_steps);
    const int decay_step = std::max(1, static_cast<int>(0.8 * total_steps));

    AdamWConfig ocfg;
    ocfg.lr = hyper.lr;
    ocfg.weight_decay = hyper.decay_as_weight_decay ? hyper.decay_ratio : hyper.weight_decay;
    AdamW opt(ocfg);
    auto params = model.reg.trainable();
    model.set_train(true);

    Rng rng(hyper.seed ^ 0x9e3779b97f4a7c15ull);
    TrainResult res;
    int step = 0;
    const std::size_t plane = static_cast<std::size_t>(S) * S;
    for (int epoch = 0; epoch < hyper.epochs && step < total_steps; ++epoch) {
        std::vector<int> order(cands.crops.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (int b = 0; b < steps_per_epoch && step < total_steps; ++b) {
            Tensor x = Tensor::zeros({batch, 3, S, S});
            Tensor t = Tensor::zeros({batch});
            for (int s = 0; s < batch; ++s) {
                const int idx = order[static_cast<std::size_t>(b * batch + s)];
                ImageU8 crop = cands.crops[static_cast<std::size_t>(idx)];
                if (hyper.augment) {
                    PatchPair pp;
                    pp.image = crop;
                    pp.mask = ImageU8::make(crop.width, crop.height, 1, 0);
                    AugmentOptions aopt;
                    aopt.rescale_min = aopt.rescale_max = 1.0;  // keep candidate framing
                    pp = augment_patch(pp, hyper.seed * 1099511628211ull +
                                               static_cast<std::uint64_t>(step) * 131 +
                                               static_cast<std::uint64_t>(s),
                                       aopt);
                    crop = pp.image;
                }
                ImageU8 rs = resize_bilinear(crop, S, S);
                for (int yy = 0; yy < S; ++yy)
                    for (int xx = 0; xx < S; ++xx)
                        for (int c = 0; c < 3; ++c)
                            x.data()[(static_cast<std::size_t>(s) * 3 + c) * plane +
                                     static_cast<std::size_t>(yy) * S + xx] = rs.at(yy, xx, c) / 255.0f;
                t.data()[s] = cands.labels[static_cast<std::size_t>(idx)];
            }
            model.reg.zero_grad();
            Tensor loss = bce_loss(model.forward(x), t);
            const float lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericError("non-finite classifier loss at step " + std::to_string(step));
            backward(loss);
            opt.step(params);
            ++step;
            if (!hyper.decay_as_weight_decay && step == decay_step) opt.config().lr *= hyper.decay_ratio;
            res.loss_log.push_back(lv);
            {
                std::ostringstream os;
                os.precision(6);
                os << "train-class step=" << step << " epoch=" << epoch << " loss=" << lv
                   << " lr=" << opt.config().lr;
                detail::log_line(log, os.str());
            }
        }
    }
    res.steps = step;
    res.final_lr = opt.config().lr;
    model.set_train(false);
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model.reg);
    return res;
}

}  // namespace mitoseg
