#pragma once

#include <string>
#include <vector>

#include "mitoseg/image.hpp"
#include "mitoseg/metrics.hpp"
#include "mitoseg/stain.hpp"

namespace mitoseg {

// Synthetic H&E-like scenes: textured eosin background, hematoxylin-stained
// elliptical nuclei. Mitosis-class nuclei are darker, larger and more
// irregular than the confounders, with partially overlapping color ranges so
// stage 1 has real false positives for stage 2 to remove.
struct SynthConfig {
    int image_size = 512;
    int mitoses_min = 3, mitoses_max = 6;
    int confounders_min = 12, confounders_max = 22;
    double mitosis_radius_min = 8.5, mitosis_radius_max = 12.0;
    double confounder_radius_min = 4.5, confounder_radius_max = 8.5;
    double mitosis_h_mean = 1.40, mitosis_h_sd = 0.12;
    double confounder_h_mean = 0.95, confounder_h_sd = 0.20;
    double mitosis_irregularity = 0.30;
    double confounder_irregularity = 0.06;
    double background_e_mean = 0.30, background_e_sd = 0.06;
    double background_h_haze = 0.06;
    int placement_retries = 60;
    StainProfile stains = reference_stain_profile();
};

struct SynthImage {
    ImageU8 image;
    ImageU8 mask;                     // mitosis-class pixels only
    std::vector<Centroid> centroids;  // one per mitosis
    std::vector<std::string> warnings;
};

struct SynthDataset {
    std::vector<SynthImage> items;
};

namespace detail {

struct Nucleus {
    double cx, cy;
    double rx, ry;
    double angle;        // orientation of the major axis
    double wobble_amp;   // radial irregularity amplitude
    double wobble_phase;
    int lobes;
    double conc_h;
    bool mitosis;
};

inline bool nucleus_overlaps(const Nucleus& a, const std::vector<Nucleus>& placed) {
    for (const auto& b : placed) {
        const double dx = a.cx - b.cx, dy = a.cy - b.cy;
        const double min_d = std::max(a.rx, a.ry) * (1 + a.wobble_amp) +
                             std::max(b.rx, b.ry) * (1 + b.wobble_amp) + 2.0;
        if (dx * dx + dy * dy < min_d * min_d) return true;
    }
    return false;
}

// signed distance-ish membership: 1 well inside, 0 outside, soft edge
inline double nucleus_coverage(const Nucleus& n, double px, double py) {
    const double dx = px - n.cx, dy = py - n.cy;
    const double ca = std::cos(n.angle), sa = std::sin(n.angle);
    const double u = (dx * ca + dy * sa) / n.rx;
    const double v = (-dx * sa + dy * ca) / n.ry;
    const double r = std::sqrt(u * u + v * v);
    const double theta = std::atan2(v, u);
    const double boundary = 1.0 + n.wobble_amp * std::sin(n.lobes * theta + n.wobble_phase);
    const double edge = 0.12;  // soft rim, in normalized radius units
    if (r <= boundary - edge) return 1.0;
    if (r >= boundary + edge) return 0.0;
    return (boundary + edge - r) / (2.0 * edge);
}

}  // namespace detail

inline SynthImage generate_synthetic_image(const SynthConfig& cfg, Rng& rng) {
    const int S = cfg.image_size;
    SynthImage out;
    out.image = ImageU8::make(S, S, 3);
    out.mask = ImageU8::make(S, S, 1, 0);

    // low-frequency eosin texture from a coarse value-noise grid
    const int grid = 9;
    std::vector<double> noise(static_cast<std::size_t>(grid) * grid);
    for (auto& v : noise) v = rng.normal(0.0, cfg.background_e_sd);
    auto bg_e_at = [&](double y, double x) {
        const double gy = y / (S - 1.0) * (grid - 1);
        const double gx = x / (S - 1.0) * (grid - 1);
        const int y0 = std::min(static_cast<int>(gy), grid - 2);
        const int x0 = std::min(static_cast<int>(gx), grid - 2);
        const double fy = gy - y0, fx = gx - x0;
        auto at = [&](int yy, int xx) { return noise[static_cast<std::size_t>(yy) * grid + xx]; };
        const double v = at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
                         at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx;
        return std::max(0.05, cfg.background_e_mean + v);
    };

    std::vector<detail::Nucleus> nuclei;
    auto place = [&](bool mitosis, int want) {
        int placed = 0;
        for (int i = 0; i < want; ++i) {
            bool ok = false;
            for (int attempt = 0; attempt < cfg.placement_retries && !ok; ++attempt) {
                detail::Nucleus n;
                n.mitosis = mitosis;
                const double rmin = mitosis ? cfg.mitosis_radius_min : cfg.confounder_radius_min;
                const double rmax = mitosis ? cfg.mitosis_radius_max : cfg.confounder_radius_max;
                n.rx = rng.uniform(rmin, rmax);
                n.ry = rng.uniform(rmin, rmax);
                n.angle = rng.uniform(0.0, 3.14159265358979);
                n.wobble_amp = mitosis ? cfg.mitosis_irregularity : cfg.confounder_irregularity;
                n.wobble_phase = rng.uniform(0.0, 6.28318530717959);
                n.lobes = mitosis ? rng.uniform_int(3, 5) : 2;
                const double margin = std::max(n.rx, n.ry) * (1 + n.wobble_amp) + 3.0;
                n.cx = rng.uniform(margin, S - margin);
                n.cy = rng.uniform(margin, S - margin);
                n.conc_h = std::max(0.2, mitosis ? rng.normal(cfg.mitosis_h_mean, cfg.mitosis_h_sd)
                                                 : rng.normal(cfg.confounder_h_mean, cfg.confounder_h_sd));
                if (!detail::nucleus_overlaps(n, nuclei)) {
                    nuclei.push_back(n);
                    ok = true;
                    ++placed;
                }
            }
            if (!ok)
                out.warnings.push_back(std::string("placement failed for a ") +
                                       (mitosis ? "mitosis" : "confounder") + " nucleus");
        }
        return placed;
    };

    const int want_mit = rng.uniform_int(cfg.mitoses_min, cfg.mitoses_max);
    const int want_conf = rng.uniform_int(cfg.confounders_min, cfg.confounders_max);
    place(true, want_mit);
    place(false, want_conf);

    for (const auto& n : nuclei)
        if (n.mitosis) out.centroids.push_back({n.cx, n.cy});

    // rasterize: accumulate per-pixel concentrations, then Beer-Lambert
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            double ch = cfg.background_h_haze;
            double ce = bg_e_at(y, x);
            for (const auto& n : nuclei) {
                const double reach = std::max(n.rx, n.ry) * (1 + n.wobble_amp) + 2.0;
                if (std::abs(x - n.cx) > reach || std::abs(y - n.cy) > reach) continue;
                const double cov = detail::nucleus_coverage(n, x, y);
                if (cov <= 0.0) continue;
                ch += cov * n.conc_h;
                ce += cov * 0.10;  // nuclei carry a little eosin as well
                if (n.mitosis && cov >= 0.5) out.mask.at(y, x, 0) = 255;
            }
            const auto rgb = stain_to_rgb(cfg.stains, ch, ce);
            out.image.at(y, x, 0) = rgb[0];
            out.image.at(y, x, 1) = rgb[1];
            out.image.at(y, x, 2) = rgb[2];
        }
    return out;
}

inline SynthDataset generate_synthetic(const SynthConfig& cfg, int n_images, std::uint64_t seed) {
    SynthDataset ds;
    Rng rng(seed);
    for (int i = 0; i < n_images; ++i) ds.items.push_back(generate_synthetic_image(cfg, rng));
    return ds;
}

}  // namespace mitoseg
