#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mitoseg/image.hpp"

namespace mitoseg {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

// H&E optical-density stain basis: columns are unit H and E vectors.
struct StainProfile {
    std::array<Vec3, 2> stain;    // stain[0] = hematoxylin-like, stain[1] = eosin-like
    std::array<double, 2> max_c;  // 99th-percentile concentration per stain
    double io = 255.0;
};

namespace stain_detail {

inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline Vec3 scale3(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// nearest-rank percentile; invariant under duplicating every sample
inline double percentile(std::vector<double> v, double pct) {
    if (v.empty()) throw NumericError("percentile of an empty sample");
    std::sort(v.begin(), v.end());
    const double rank = pct / 100.0 * static_cast<double>(v.size());
    std::size_t k = static_cast<std::size_t>(std::ceil(rank));
    if (k < 1) k = 1;
    if (k > v.size()) k = v.size();
    return v[k - 1];
}

// Cyclic Jacobi sweeps on a symmetric 3x3; returns eigenvalues (descending)
// and the matching orthonormal eigenvectors as rows of `vecs`.
inline void eigen_sym3(const Mat3& m, Vec3& vals, std::array<Vec3, 3>& vecs) {
    Mat3 a = m;
    Mat3 v{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::abs(a[0][1]) + std::abs(a[0][2]) + std::abs(a[1][2]);
        if (off < 1e-15) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (std::abs(a[p][q]) < 1e-18) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < 3; ++i) {
                    const double aip = a[i][p], aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for (int i = 0; i < 3; ++i) {
                    const double api = a[p][i], aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for (int i = 0; i < 3; ++i) {
                    const double vip = v[i][p], viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int x, int y) { return a[x][x] > a[y][y]; });
    for (int i = 0; i < 3; ++i) {
        vals[static_cast<std::size_t>(i)] = a[order[static_cast<std::size_t>(i)]][order[static_cast<std::size_t>(i)]];
        for (int r = 0; r < 3; ++r)
            vecs[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)] =
                v[r][order[static_cast<std::size_t>(i)]];
    }
}

// 2x3 pseudo-inverse of the stain basis via normal equations.
struct StainPinv {
    std::array<std::array<double, 3>, 2> rows;
};

inline StainPinv pinv(const StainProfile& p) {
    const Vec3& a = p.stain[0];
    const Vec3& b = p.stain[1];
    if (norm3(cross3(a, b)) < 1e-6)
        throw NumericError("stain matrix is singular: the two stain vectors are parallel");
    const double g00 = dot3(a, a), g01 = dot3(a, b), g11 = dot3(b, b);
    const double det = g00 * g11 - g01 * g01;
    if (std::abs(det) < 1e-12) throw NumericError("stain matrix is singular");
    const double i00 = g11 / det, i01 = -g01 / det, i11 = g00 / det;
    StainPinv out;
    for (int c = 0; c < 3; ++c) {
        out.rows[0][static_cast<std::size_t>(c)] = i00 * a[static_cast<std::size_t>(c)] + i01 * b[static_cast<std::size_t>(c)];
        out.rows[1][static_cast<std::size_t>(c)] = i01 * a[static_cast<std::size_t>(c)] + i11 * b[static_cast<std::size_t>(c)];
    }
    return out;
}

}  // namespace stain_detail

// OD = -log((v + 1) / io); the +1 guards log 0 on black pixels.
inline Vec3 rgb_to_od(std::uint8_t r, std::uint8_t g, std::uint8_t b, double io = 255.0) {
    auto one = [io](std::uint8_t v) { return -std::log((static_cast<double>(v) + 1.0) / io); };
    return {one(r), one(g), one(b)};
}

inline std::array<std::uint8_t, 3> od_to_rgb(const Vec3& od, double io = 255.0) {
    std::array<std::uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c) {
        double v = io * std::exp(-od[static_cast<std::size_t>(c)]) - 1.0;
        v = std::min(std::max(v, 0.0), 255.0);
        out[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(v));
    }
    return out;
}

// Beer-Lambert forward model: two concentrations -> RGB pixel.
inline std::array<std::uint8_t, 3> stain_to_rgb(const StainProfile& p, double c_h, double c_e) {
    Vec3 od;
    for (int i = 0; i < 3; ++i)
        od[static_cast<std::size_t>(i)] =
            p.stain[0][static_cast<std::size_t>(i)] * c_h + p.stain[1][static_cast<std::size_t>(i)] * c_e;
    return od_to_rgb(od, p.io);
}

struct StainEstimateOptions {
    double od_threshold = 0.15;     // discard pixels whose OD norm is below this
    double angle_percentile = 1.0;  // robust angular extremes
    double io = 255.0;
    int min_tissue_pixels = 100;
};

// Macenko estimation: principal plane of the OD cloud, robust angular
// extremes as the stain vectors, 99th-percentile concentrations.
inline StainProfile estimate_stain_profile(const ImageU8& image, const StainEstimateOptions& opt = {}) {
    if (image.channels != 3) throw DataError("stain estimation expects an RGB image");
    using namespace stain_detail;

    std::vector<Vec3> ods;
    ods.reserve(static_cast<std::size_t>(image.width) * image.height / 4);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            Vec3 od = rgb_to_od(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2), opt.io);
            if (norm3(od) >= opt.od_threshold) ods.push_back(od);
        }
    if (static_cast<int>(ods.size()) < opt.min_tissue_pixels)
        throw DataError("insufficient tissue: " + std::to_string(ods.size()) + " pixels above OD " +
                        std::to_string(opt.od_threshold));

    Vec3 mean{0, 0, 0};
    for (const auto& od : ods)
        for (int i = 0; i < 3; ++i) mean[static_cast<std::size_t>(i)] += od[static_cast<std::size_t>(i)];
    for (int i = 0; i < 3; ++i) mean[static_cast<std::size_t>(i)] /= static_cast<double>(ods.size());
    Mat3 cov{};
    for (const auto& od : ods)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
                    (od[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) *
                    (od[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)]);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] /= static_cast<double>(ods.size());

    Vec3 vals;
    std::array<Vec3, 3> vecs;
    eigen_sym3(cov, vals, vecs);
    Vec3 v1 = vecs[0], v2 = vecs[1];
    // keep the plane basis pointed into the positive OD octant
    if (v1[0] + v1[1] + v1[2] < 0) v1 = scale3(v1, -1.0);
    if (v2[0] + v2[1] + v2[2] < 0) v2 = scale3(v2, -1.0);

    std::vector<double> angles;
    angles.reserve(ods.size());
    for (const auto& od : ods) angles.push_back(std::atan2(dot3(od, v2), dot3(od, v1)));
    const double a_lo = percentile(angles, opt.angle_percentile);
    const double a_hi = percentile(angles, 100.0 - opt.angle_percentile);

    auto direction = [&](double angle) {
        Vec3 u;
        for (int i = 0; i < 3; ++i)
            u[static_cast<std::size_t>(i)] = std::cos(angle) * v1[static_cast<std::size_t>(i)] +
                                             std::sin(angle) * v2[static_cast<std::size_t>(i)];
        if (u[0] + u[1] + u[2] < 0) u = scale3(u, -1.0);
        for (auto& c : u) c = std::max(c, 0.0);  // sign-corrected entries are non-negative
        const double n = norm3(u);
        if (n < 1e-9) throw NumericError("degenerate stain direction");
        return scale3(u, 1.0 / n);
    };
    Vec3 s_lo = direction(a_lo);
    Vec3 s_hi = direction(a_hi);

    StainProfile profile;
    profile.io = opt.io;
    // hematoxylin-like vector (larger blue OD component) goes first
    if (s_lo[2] >= s_hi[2]) {
        profile.stain = {s_lo, s_hi};
    } else {
        profile.stain = {s_hi, s_lo};
    }

    const StainPinv pv = pinv(profile);
    std::vector<double> c0, c1;
    c0.reserve(ods.size());
    c1.reserve(ods.size());
    for (const auto& od : ods) {
        c0.push_back(std::max(0.0, dot3({pv.rows[0][0], pv.rows[0][1], pv.rows[0][2]}, od)));
        c1.push_back(std::max(0.0, dot3({pv.rows[1][0], pv.rows[1][1], pv.rows[1][2]}, od)));
    }
    profile.max_c = {percentile(c0, 99.0), percentile(c1, 99.0)};
    if (profile.max_c[0] <= 0.0 || profile.max_c[1] <= 0.0)
        throw NumericError("stain estimation produced non-positive max concentrations");
    return profile;
}

// Decompose against the source basis, rescale concentrations to the target
// dynamic range, recompose with the target basis.
inline ImageU8 normalize_stain(const ImageU8& image, const StainProfile& source, const StainProfile& target) {
    if (image.channels != 3) throw DataError("stain normalization expects an RGB image");
    using namespace stain_detail;
    const StainPinv pv = pinv(source);
    (void)pinv(target);  // validates the target basis as well
    const double k0 = target.max_c[0] / source.max_c[0];
    const double k1 = target.max_c[1] / source.max_c[1];

    ImageU8 out = ImageU8::make(image.width, image.height, 3);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const Vec3 od = rgb_to_od(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2), source.io);
            const double c0 =
                std::max(0.0, pv.rows[0][0] * od[0] + pv.rows[0][1] * od[1] + pv.rows[0][2] * od[2]) * k0;
            const double c1 =
                std::max(0.0, pv.rows[1][0] * od[0] + pv.rows[1][1] * od[1] + pv.rows[1][2] * od[2]) * k1;
            const auto rgb = stain_to_rgb(target, c0, c1);
            out.at(y, x, 0) = rgb[0];
            out.at(y, x, 1) = rgb[1];
            out.at(y, x, 2) = rgb[2];
        }
    return out;
}

// 8-number text record: 6 matrix entries column-major, then the two maxima.
inline std::string stain_profile_to_text(const StainProfile& p) {
    std::ostringstream os;
    os.precision(10);
    for (int s = 0; s < 2; ++s)
        for (int c = 0; c < 3; ++c) os << p.stain[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)] << " ";
    os << p.max_c[0] << " " << p.max_c[1] << "\n";
    return os.str();
}

inline StainProfile stain_profile_from_text(const std::string& text) {
    std::istringstream is(text);
    StainProfile p;
    std::array<double, 8> vals{};
    for (auto& v : vals)
        if (!(is >> v)) throw DataError("stain profile record must contain 8 numbers");
    p.stain[0] = {vals[0], vals[1], vals[2]};
    p.stain[1] = {vals[3], vals[4], vals[5]};
    p.max_c = {vals[6], vals[7]};
    return p;
}

inline void save_stain_profile(const std::string& path, const StainProfile& p) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw DataError("cannot write stain profile to " + tmp);
        f << stain_profile_to_text(p);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename " + tmp + ": " + ec.message());
}

inline StainProfile load_stain_profile(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read stain profile: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return stain_profile_from_text(ss.str());
}

// Canonical H&E basis (classic Ruifrok vectors, unit-normalized). The
// synthetic generator renders through this profile and it doubles as the
// default normalization target.
inline const StainProfile& reference_stain_profile() {
    static const StainProfile p = [] {
        StainProfile q;
        auto unit = [](Vec3 v) {
            const double n = stain_detail::norm3(v);
            return stain_detail::scale3(v, 1.0 / n);
        };
        q.stain[0] = unit({0.65, 0.70, 0.29});  // hematoxylin
        q.stain[1] = unit({0.07, 0.99, 0.11});  // eosin
        q.max_c = {1.0, 0.6};
        q.io = 255.0;
        return q;
    }();
    return p;
}

}  // namespace mitoseg
