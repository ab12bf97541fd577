#pragma once

#include <algorithm>
#include <optional>

#include "mitoseg/classnet.hpp"
#include "mitoseg/regions.hpp"
#include "mitoseg/segnet.hpp"
#include "mitoseg/stain.hpp"
#include "mitoseg/tiling.hpp"

namespace mitoseg {

struct TwoStageOptions {
    int window = 0;  // 0: whole image when divisible by 8, else capped auto window
    float seg_threshold = 0.5f;
    int min_area = 100;
    int crop_size = 64;
    float class_threshold = 0.5f;
    bool stage1_only = false;
    bool normalize_stain = false;
    StainProfile target_profile = reference_stain_profile();
    int max_auto_window = 512;
};

namespace detail {

inline int resolve_window(int requested, int h, int w, int max_auto) {
    if (requested > 0) {
        if (requested % 8 != 0) throw ConfigError("tile window must be divisible by 8");
        return std::min({requested, h / 8 * 8, w / 8 * 8});
    }
    const int cap = std::min({max_auto, h, w});
    const int win = cap / 8 * 8;
    if (win < 8) throw ConfigError("image too small to tile: " + std::to_string(h) + "x" + std::to_string(w));
    return win;
}

}  // namespace detail

using SegForwardFn = std::function<Tensor(const Tensor&)>;  // 1x3xWxW -> 1x1xWxW

// Tiled segmentation over any per-tile forward: plan, per-tile forward,
// overlap-averaged stitch.
inline Tensor segment_tiles(const SegForwardFn& forward, const ImageU8& image, int window = 0,
                            int max_auto_window = 512) {
    NoGradGuard inference;
    const int win = detail::resolve_window(window, image.height, image.width, max_auto_window);
    TilePlan plan = plan_tiles(image.height, image.width, win);
    std::vector<Tensor> maps;
    maps.reserve(plan.offsets.size());
    Tensor whole = image_to_tensor(image);
    const auto src = whole.data();
    for (const auto& [r, c] : plan.offsets) {
        Tensor tile = Tensor::zeros({1, 3, win, win});
        auto dst = tile.data();
        const std::size_t plane_src = static_cast<std::size_t>(image.height) * image.width;
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < win; ++y)
                std::copy_n(src.data() + ch * plane_src + static_cast<std::size_t>(r + y) * image.width + c,
                            win, dst.data() + (static_cast<std::size_t>(ch) * win + y) * win);
        maps.push_back(forward(tile));
    }
    return stitch_average(maps, plan);
}

inline Tensor segment_image(SegModel& model, const ImageU8& image, int window = 0,
                            int max_auto_window = 512) {
    const bool was_training = model.training;
    model.training = false;
    Tensor out = segment_tiles([&model](const Tensor& t) { return model.forward(t); }, image, window,
                               max_auto_window);
    model.training = was_training;
    return out;
}

// mean probability over the region's member pixels
inline double region_mean_probability(const Tensor& prob, const Region& r, float threshold) {
    const int W = prob.dim(3);
    double acc = 0.0;
    int n = 0;
    for (int y = r.y0; y <= r.y1; ++y)
        for (int x = r.x0; x <= r.x1; ++x) {
            const float v = prob.data()[static_cast<std::size_t>(y) * W + x];
            if (v > threshold) {
                acc += v;
                ++n;
            }
        }
    return n ? acc / n : 0.0;
}

// Full cascade: segmentation -> regions -> candidates -> classifier filter.
// Detections come back sorted by descending score. In stage1-only mode the
// score is the region's mean probability and the classifier never runs.
inline std::vector<DetectionPoint> run_two_stage_fn(const ImageU8& image, const SegForwardFn& seg_fn,
                                                    ClassModel* cls, const TwoStageOptions& opt = {},
                                                    std::vector<std::string>* warnings = nullptr) {
    const ImageU8* input = &image;
    ImageU8 normalized;
    if (opt.normalize_stain) {
        try {
            StainProfile src = estimate_stain_profile(image);
            normalized = normalize_stain(image, src, opt.target_profile);
            input = &normalized;
        } catch (const DataError& e) {
            if (warnings) warnings->push_back(std::string("stain normalization skipped: ") + e.what());
        }
    }

    Tensor prob = segment_tiles(seg_fn, *input, opt.window, opt.max_auto_window);
    auto regions = label_regions(prob, opt.seg_threshold);
    auto candidates = extract_candidates(*input, regions, opt.min_area, opt.crop_size);

    std::vector<DetectionPoint> dets;
    if (opt.stage1_only || cls == nullptr) {
        for (const auto& c : candidates)
            dets.push_back({c.region.cx, c.region.cy,
                            region_mean_probability(prob, c.region, opt.seg_threshold), c.region.area});
    } else {
        std::vector<ImageU8> crops;
        crops.reserve(candidates.size());
        for (const auto& c : candidates) crops.push_back(c.crop);
        auto results = classify_candidates(*cls, crops);
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            if (!results[i].ok) {
                if (warnings) warnings->push_back("candidate skipped: " + results[i].error);
                continue;
            }
            if (results[i].probability >= opt.class_threshold)
                dets.push_back({candidates[i].region.cx, candidates[i].region.cy, results[i].probability,
                                candidates[i].region.area});
        }
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const DetectionPoint& a, const DetectionPoint& b) { return a.score > b.score; });
    return dets;
}

inline std::vector<DetectionPoint> run_two_stage(const ImageU8& image, SegModel& seg, ClassModel* cls,
                                                 const TwoStageOptions& opt = {},
                                                 std::vector<std::string>* warnings = nullptr) {
    const bool was_training = seg.training;
    seg.training = false;
    auto dets = run_two_stage_fn(
        image, [&seg](const Tensor& t) { return seg.forward(t); }, cls, opt, warnings);
    seg.training = was_training;
    return dets;
}

}  // namespace mitoseg
