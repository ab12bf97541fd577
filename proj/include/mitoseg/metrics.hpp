#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mitoseg/core.hpp"

namespace mitoseg {

struct ConfusionCounts {
    int tp = 0;
    int fp = 0;
    int fn = 0;
};

struct DetectionPoint {
    double x = 0.0;
    double y = 0.0;
    double score = 0.0;
    int area = 0;
};

struct Centroid {
    double x = 0.0;
    double y = 0.0;
};

struct MatchResult {
    ConfusionCounts counts;
    std::vector<std::pair<int, int>> pairs;  // (prediction index, ground-truth index)
};

// One-to-one greedy matching by ascending distance within the radius.
// Ties resolve by lower prediction index, then lower ground-truth index.
inline MatchResult match_detections(const std::vector<DetectionPoint>& preds,
                                    const std::vector<Centroid>& gts, double radius = 20.0) {
    if (radius < 0.0) throw ConfigError("match radius must be non-negative, got " + std::to_string(radius));
    struct Cand {
        double d2;
        int pi, gi;
    };
    std::vector<Cand> cands;
    const double r2 = radius * radius;
    for (int pi = 0; pi < static_cast<int>(preds.size()); ++pi)
        for (int gi = 0; gi < static_cast<int>(gts.size()); ++gi) {
            const double dx = preds[static_cast<std::size_t>(pi)].x - gts[static_cast<std::size_t>(gi)].x;
            const double dy = preds[static_cast<std::size_t>(pi)].y - gts[static_cast<std::size_t>(gi)].y;
            const double d2 = dx * dx + dy * dy;
            if (d2 <= r2) cands.push_back({d2, pi, gi});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.d2 != b.d2) return a.d2 < b.d2;
        if (a.pi != b.pi) return a.pi < b.pi;
        return a.gi < b.gi;
    });
    std::vector<char> p_used(preds.size(), 0), g_used(gts.size(), 0);
    MatchResult res;
    for (const auto& c : cands) {
        if (p_used[static_cast<std::size_t>(c.pi)] || g_used[static_cast<std::size_t>(c.gi)]) continue;
        p_used[static_cast<std::size_t>(c.pi)] = 1;
        g_used[static_cast<std::size_t>(c.gi)] = 1;
        res.pairs.emplace_back(c.pi, c.gi);
    }
    res.counts.tp = static_cast<int>(res.pairs.size());
    res.counts.fp = static_cast<int>(preds.size()) - res.counts.tp;
    res.counts.fn = static_cast<int>(gts.size()) - res.counts.tp;
    return res;
}

struct DetectionMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f_score = 0.0;
};

inline double f_score_from(double precision, double recall) {
    const double s = precision + recall;
    return (s > 0.0) ? 2.0 * precision * recall / s : 0.0;
}

// Degenerate denominators resolve to 0 by convention.
inline DetectionMetrics detection_metrics(const ConfusionCounts& c) {
    DetectionMetrics m;
    m.precision = (c.tp + c.fp > 0) ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
    m.recall = (c.tp + c.fn > 0) ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
    m.f_score = f_score_from(m.precision, m.recall);
    return m;
}

inline std::string metrics_report_text(const ConfusionCounts& c, const DetectionMetrics& m) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "detections matched against ground truth\n";
    os << "  TP " << c.tp << "  FP " << c.fp << "  FN " << c.fn << "\n";
    os << "  precision=" << m.precision << " recall=" << m.recall << " f_score=" << m.f_score << "\n";
    return os.str();
}

inline std::string metrics_report_csv(const ConfusionCounts& c, const DetectionMetrics& m) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << "precision,recall,f_score,TP,FP,FN\n";
    os << m.precision << "," << m.recall << "," << m.f_score << "," << c.tp << "," << c.fp << "," << c.fn << "\n";
    return os.str();
}

}  // namespace mitoseg
