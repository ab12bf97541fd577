#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "mitoseg/tensor.hpp"

namespace mitoseg {

// Sliding-window plan covering the full image; tiles may overlap and the
// overlap region is averaged at stitch time.
struct TilePlan {
    int window = 0;
    int full_h = 0;
    int full_w = 0;
    std::vector<std::pair<int, int>> offsets;  // (row, col)
};

namespace detail {

inline std::vector<int> axis_offsets(int dim, int window) {
    if (window == dim) return {0};
    const int n = (dim + window - 1) / window;  // minimal tile count
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double pos = static_cast<double>(i) * (dim - window) / (n - 1);
        out.push_back(static_cast<int>(std::lround(pos)));
    }
    return out;
}

}  // namespace detail

inline TilePlan plan_tiles(int full_h, int full_w, int window) {
    if (window <= 0) throw ConfigError("tile window must be positive, got " + std::to_string(window));
    if (window > full_h || window > full_w)
        throw ConfigError("tile window " + std::to_string(window) + " exceeds image extent " +
                          std::to_string(full_h) + "x" + std::to_string(full_w));
    TilePlan plan;
    plan.window = window;
    plan.full_h = full_h;
    plan.full_w = full_w;
    for (int r : detail::axis_offsets(full_h, window))
        for (int c : detail::axis_offsets(full_w, window)) plan.offsets.emplace_back(r, c);
    return plan;
}

// Per-pixel count of covering tiles; >= 1 everywhere by construction.
inline std::vector<int> coverage_map(const TilePlan& plan) {
    std::vector<int> cover(static_cast<std::size_t>(plan.full_h) * plan.full_w, 0);
    for (const auto& [r, c] : plan.offsets)
        for (int y = r; y < r + plan.window; ++y)
            for (int x = c; x < c + plan.window; ++x)
                ++cover[static_cast<std::size_t>(y) * plan.full_w + x];
    return cover;
}

// Average the per-tile probability maps over the coverage counts.
inline Tensor stitch_average(const std::vector<Tensor>& tile_maps, const TilePlan& plan) {
    if (tile_maps.size() != plan.offsets.size())
        throw ShapeError("stitch_average: " + std::to_string(tile_maps.size()) + " maps for " +
                         std::to_string(plan.offsets.size()) + " planned tiles");
    for (const auto& t : tile_maps)
        require_shape(t.ndim() == 4 && t.dim(0) == 1 && t.dim(1) == 1 && t.dim(2) == plan.window &&
                          t.dim(3) == plan.window,
                      "stitch_average: tile map shape " + shape_str(t.shape()) + " does not match window " +
                          std::to_string(plan.window));

    Tensor out = Tensor::zeros({1, 1, plan.full_h, plan.full_w});
    std::vector<int> cover(static_cast<std::size_t>(plan.full_h) * plan.full_w, 0);
    auto acc = out.data();
    for (std::size_t t = 0; t < tile_maps.size(); ++t) {
        const auto [r, c] = plan.offsets[t];
        const auto src = tile_maps[t].data();
        for (int y = 0; y < plan.window; ++y)
            for (int x = 0; x < plan.window; ++x) {
                const std::size_t dst = static_cast<std::size_t>(r + y) * plan.full_w + (c + x);
                acc[dst] += src[static_cast<std::size_t>(y) * plan.window + x];
                ++cover[dst];
            }
    }
    for (std::size_t i = 0; i < cover.size(); ++i) acc[i] /= static_cast<float>(cover[i]);
    return out;
}

}  // namespace mitoseg
