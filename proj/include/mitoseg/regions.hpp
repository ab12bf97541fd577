#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "mitoseg/image.hpp"
#include "mitoseg/tensor.hpp"

namespace mitoseg {

// Connected foreground component: area, centroid (x = column, y = row),
// bounding box inclusive of both corners.
struct Region {
    int label = 0;
    int area = 0;
    double cx = 0.0;
    double cy = 0.0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

namespace detail {

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int find(int x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            x = parent[static_cast<std::size_t>(x)];
        }
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    }
};

}  // namespace detail

// Two-pass union-find labeling, 8-connectivity. Labels are contiguous from 1
// in row-major first-encounter order.
inline std::vector<Region> label_mask(const std::vector<std::uint8_t>& fg, int width, int height) {
    std::vector<int> provisional(static_cast<std::size_t>(width) * height, 0);
    detail::UnionFind uf(static_cast<int>(fg.size()) / 2 + 2);
    int next = 1;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            if (!fg[i]) continue;
            // previously visited 8-neighbours: W, NW, N, NE
            int neigh[4];
            int nn = 0;
            if (x > 0 && fg[i - 1]) neigh[nn++] = provisional[i - 1];
            if (y > 0) {
                const std::size_t up = i - static_cast<std::size_t>(width);
                if (x > 0 && fg[up - 1]) neigh[nn++] = provisional[up - 1];
                if (fg[up]) neigh[nn++] = provisional[up];
                if (x + 1 < width && fg[up + 1]) neigh[nn++] = provisional[up + 1];
            }
            if (nn == 0) {
                provisional[i] = next++;
            } else {
                int mn = neigh[0];
                for (int k = 1; k < nn; ++k) mn = std::min(mn, neigh[k]);
                provisional[i] = mn;
                for (int k = 0; k < nn; ++k) uf.unite(mn, neigh[k]);
            }
        }

    std::vector<int> compact(static_cast<std::size_t>(next), 0);
    std::vector<Region> regions;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            if (!fg[i]) continue;
            const int root = uf.find(provisional[i]);
            int lbl = compact[static_cast<std::size_t>(root)];
            if (lbl == 0) {
                lbl = static_cast<int>(regions.size()) + 1;
                compact[static_cast<std::size_t>(root)] = lbl;
                Region r;
                r.label = lbl;
                r.x0 = r.x1 = x;
                r.y0 = r.y1 = y;
                regions.push_back(r);
            }
            Region& r = regions[static_cast<std::size_t>(lbl - 1)];
            r.area += 1;
            r.cx += x;
            r.cy += y;
            r.x0 = std::min(r.x0, x);
            r.x1 = std::max(r.x1, x);
            r.y0 = std::min(r.y0, y);
            r.y1 = std::max(r.y1, y);
        }
    for (auto& r : regions) {
        r.cx /= r.area;
        r.cy /= r.area;
    }
    return regions;
}

// Binarize a probability map (strictly greater than threshold) and label it.
inline std::vector<Region> label_regions(const Tensor& prob, float threshold = 0.5f) {
    require_shape(prob.ndim() == 4 && prob.dim(0) == 1 && prob.dim(1) == 1,
                  "label_regions expects a 1x1xHxW probability map, got " + shape_str(prob.shape()));
    const int H = prob.dim(2), W = prob.dim(3);
    std::vector<std::uint8_t> fg(static_cast<std::size_t>(H) * W);
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = prob.data()[i] > threshold ? 1 : 0;
    return label_mask(fg, W, H);
}

inline std::vector<Region> label_mask_image(const ImageU8& mask) {
    if (mask.channels != 1) throw DataError("label_mask_image expects a single-channel mask");
    std::vector<std::uint8_t> fg(mask.pixels.size());
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = mask.pixels[i] > 127 ? 1 : 0;
    return label_mask(fg, mask.width, mask.height);
}

struct Candidate {
    ImageU8 crop;
    Region region;
};

// Regions strictly larger than min_area become candidates; the crop is a
// crop_size square centered on the centroid, zero-padded at image borders.
inline std::vector<Candidate> extract_candidates(const ImageU8& image, const std::vector<Region>& regions,
                                                 int min_area = 100, int crop_size = 64) {
    std::vector<Candidate> out;
    for (const auto& r : regions) {
        if (r.area <= min_area) continue;
        Candidate cand;
        cand.region = r;
        cand.crop = ImageU8::make(crop_size, crop_size, image.channels, 0);
        const int x0 = static_cast<int>(std::lround(r.cx)) - crop_size / 2;
        const int y0 = static_cast<int>(std::lround(r.cy)) - crop_size / 2;
        for (int y = 0; y < crop_size; ++y) {
            const int sy = y0 + y;
            if (sy < 0 || sy >= image.height) continue;
            for (int x = 0; x < crop_size; ++x) {
                const int sx = x0 + x;
                if (sx < 0 || sx >= image.width) continue;
                for (int c = 0; c < image.channels; ++c) cand.crop.at(y, x, c) = image.at(sy, sx, c);
            }
        }
        out.push_back(std::move(cand));
    }
    return out;
}

}  // namespace mitoseg
