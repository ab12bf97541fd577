#pragma once

#include <vector>

#include "mitoseg/image.hpp"
#include "mitoseg/metrics.hpp"

namespace mitoseg {

enum class PatchStrategy { sliding, random, mitosis_centered };

struct PatchPair {
    ImageU8 image;
    ImageU8 mask;
    int x0 = 0;
    int y0 = 0;
};

namespace detail {

// Stride positions, with a final window clamped to the image edge when the
// regular stride does not land exactly.
inline std::vector<int> sliding_axis_positions(int dim, int patch, int stride) {
    std::vector<int> out;
    int pos = 0;
    while (pos + patch <= dim) {
        out.push_back(pos);
        pos += stride;
    }
    if (out.empty() || out.back() + patch < dim) out.push_back(dim - patch);
    return out;
}

inline PatchPair crop_pair(const ImageU8& image, const ImageU8& mask, int x0, int y0, int patch) {
    PatchPair pp;
    pp.x0 = x0;
    pp.y0 = y0;
    pp.image = ImageU8::make(patch, patch, image.channels);
    pp.mask = ImageU8::make(patch, patch, 1);
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) {
            for (int c = 0; c < image.channels; ++c) pp.image.at(y, x, c) = image.at(y0 + y, x0 + x, c);
            pp.mask.at(y, x, 0) = mask.at(y0 + y, x0 + x, 0);
        }
    return pp;
}

}  // namespace detail

struct PatchOptions {
    int patch = 256;
    int overlap = 32;       // sliding only
    int count = 0;          // random: total; mitosis_centered: 0 means one per centroid
    int center_jitter = 16; // mitosis_centered
};

inline std::vector<PatchPair> prepare_patches(const ImageU8& image, const ImageU8& mask,
                                              PatchStrategy strategy, const PatchOptions& opt,
                                              const std::vector<Centroid>& centroids, Rng& rng) {
    if (opt.patch > image.width || opt.patch > image.height)
        throw ConfigError("patch extent " + std::to_string(opt.patch) + " exceeds image " +
                          std::to_string(image.width) + "x" + std::to_string(image.height));
    if (mask.width != image.width || mask.height != image.height)
        throw ShapeError("patch preparation: image and mask extents differ");

    std::vector<PatchPair> out;
    const int max_x = image.width - opt.patch;
    const int max_y = image.height - opt.patch;

    switch (strategy) {
        case PatchStrategy::sliding: {
            const int stride = opt.patch - opt.overlap;
            if (stride <= 0) throw ConfigError("sliding overlap must be smaller than the patch extent");
            for (int y : detail::sliding_axis_positions(image.height, opt.patch, stride))
                for (int x : detail::sliding_axis_positions(image.width, opt.patch, stride))
                    out.push_back(detail::crop_pair(image, mask, x, y, opt.patch));
            break;
        }
        case PatchStrategy::random: {
            for (int i = 0; i < opt.count; ++i) {
                const int x = max_x > 0 ? rng.uniform_int(0, max_x) : 0;
                const int y = max_y > 0 ? rng.uniform_int(0, max_y) : 0;
                out.push_back(detail::crop_pair(image, mask, x, y, opt.patch));
            }
            break;
        }
        case PatchStrategy::mitosis_centered: {
            if (centroids.empty()) break;
            const int n = opt.count > 0 ? opt.count : static_cast<int>(centroids.size());
            for (int i = 0; i < n; ++i) {
                const auto& c = centroids[static_cast<std::size_t>(i) % centroids.size()];
                const int jx = opt.center_jitter > 0 ? rng.uniform_int(-opt.center_jitter, opt.center_jitter) : 0;
                const int jy = opt.center_jitter > 0 ? rng.uniform_int(-opt.center_jitter, opt.center_jitter) : 0;
                int x = static_cast<int>(std::lround(c.x)) + jx - opt.patch / 2;
                int y = static_cast<int>(std::lround(c.y)) + jy - opt.patch / 2;
                x = std::min(std::max(x, 0), max_x);
                y = std::min(std::max(y, 0), max_y);
                out.push_back(detail::crop_pair(image, mask, x, y, opt.patch));
            }
            break;
        }
    }
    return out;
}

// --- geometric helpers -----------------------------------------------------

inline ImageU8 flip_horizontal(const ImageU8& im) {
    ImageU8 out = ImageU8::make(im.width, im.height, im.channels);
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(y, im.width - 1 - x, c);
    return out;
}

inline ImageU8 flip_vertical(const ImageU8& im) {
    ImageU8 out = ImageU8::make(im.width, im.height, im.channels);
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(im.height - 1 - y, x, c);
    return out;
}

// counter-clockwise quarter turns
inline ImageU8 rotate90(const ImageU8& im, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return im;
    ImageU8 out = ImageU8::make(k == 2 ? im.width : im.height, k == 2 ? im.height : im.width, im.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            int sy = 0, sx = 0;
            if (k == 1) {
                sy = x;
                sx = im.width - 1 - y;
            } else if (k == 2) {
                sy = im.height - 1 - y;
                sx = im.width - 1 - x;
            } else {
                sy = im.height - 1 - x;
                sx = y;
            }
            for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(sy, sx, c);
        }
    return out;
}

// Zoom about the patch center by `factor`, resampling back onto the original
// extents; border pixels replicate when zooming out.
inline ImageU8 rescale_about_center(const ImageU8& im, double factor, bool nearest) {
    ImageU8 out = ImageU8::make(im.width, im.height, im.channels);
    const double cx = (im.width - 1) * 0.5;
    const double cy = (im.height - 1) * 0.5;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            double fy = cy + (y - cy) / factor;
            double fx = cx + (x - cx) / factor;
            fy = std::min(std::max(fy, 0.0), static_cast<double>(im.height - 1));
            fx = std::min(std::max(fx, 0.0), static_cast<double>(im.width - 1));
            if (nearest) {
                const int sy = static_cast<int>(std::lround(fy));
                const int sx = static_cast<int>(std::lround(fx));
                for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(sy, sx, c);
            } else {
                const int y0 = std::min(static_cast<int>(fy), im.height - 1);
                const int x0 = std::min(static_cast<int>(fx), im.width - 1);
                const int y1 = std::min(y0 + 1, im.height - 1);
                const int x1 = std::min(x0 + 1, im.width - 1);
                const double wy = fy - y0, wx = fx - x0;
                for (int c = 0; c < im.channels; ++c) {
                    const double v = im.at(y0, x0, c) * (1 - wy) * (1 - wx) +
                                     im.at(y0, x1, c) * (1 - wy) * wx + im.at(y1, x0, c) * wy * (1 - wx) +
                                     im.at(y1, x1, c) * wy * wx;
                    out.at(y, x, c) = static_cast<std::uint8_t>(std::min(std::max(v + 0.5, 0.0), 255.0));
                }
            }
        }
    return out;
}

struct AugmentOptions {
    bool flips = true;
    bool rotations = true;
    double blur_sigma_max = 1.0;
    double rescale_min = 0.8;
    double rescale_max = 1.2;
};

// Online augmentation: flips/rotations/rescale applied identically to image
// and mask, blur to the image only. Fully determined by the seed.
inline PatchPair augment_patch(const PatchPair& in, std::uint64_t seed, const AugmentOptions& opt = {}) {
    Rng rng(seed);
    PatchPair out = in;
    if (opt.flips && rng.uniform() < 0.5) {
        out.image = flip_horizontal(out.image);
        out.mask = flip_horizontal(out.mask);
    }
    if (opt.flips && rng.uniform() < 0.5) {
        out.image = flip_vertical(out.image);
        out.mask = flip_vertical(out.mask);
    }
    if (opt.rotations) {
        const int k = rng.uniform_int(0, 3);
        out.image = rotate90(out.image, k);
        out.mask = rotate90(out.mask, k);
    }
    if (opt.rescale_max > opt.rescale_min) {
        const double f = rng.uniform(opt.rescale_min, opt.rescale_max);
        if (std::abs(f - 1.0) > 1e-3) {
            out.image = rescale_about_center(out.image, f, false);
            out.mask = rescale_about_center(out.mask, f, true);
        }
    }
    if (opt.blur_sigma_max > 0) {
        const double sigma = rng.uniform(0.0, opt.blur_sigma_max);
        if (sigma > 0.05) out.image = gaussian_blur(out.image, sigma);
    }
    return out;
}

}  // namespace mitoseg
