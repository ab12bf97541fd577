#pragma once

#include "mitoseg/image.hpp"
#include "mitoseg/metrics.hpp"

namespace mitoseg {

// Green boxes mark detections, yellow boxes mark ground-truth centroids.
// Yellow is drawn last so it wins where the two overlap.
inline ImageU8 render_overlay(const ImageU8& image, const std::vector<DetectionPoint>& detections,
                              const std::vector<Centroid>& ground_truth, int box_side = 64) {
    ImageU8 out = image;
    for (const auto& d : detections) draw_box(out, d.x, d.y, box_side, 0, 200, 0);
    for (const auto& g : ground_truth) draw_box(out, g.x, g.y, box_side, 240, 220, 0);
    return out;
}

}  // namespace mitoseg
