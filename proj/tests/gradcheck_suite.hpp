#pragma once

// Shared finite-difference suite over the operator core. Used by the unit
// tests and by the acceptance harness (which runs it at full instance count).

#include <map>
#include <string>

#include "mitoseg/nn_ops.hpp"
#include "testutil.hpp"

namespace gradsuite {

using mitoseg::Reduce;
using mitoseg::Rng;
using mitoseg::Shape;
using mitoseg::Tensor;
using refops::dvec;
using testutil::fd_check;
using testutil::rand_tensor;

struct OpResult {
    double max_rel = 0.0;
    int instances = 0;
    int elements = 0;
};

inline std::vector<float> rand_weights(std::int64_t n, Rng& rng) {
    std::vector<float> w(static_cast<std::size_t>(n));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return w;
}

inline double ref_weighted(const dvec& y, const std::vector<float>& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
    return acc;
}

// keep values away from the relu/max kinks so central differences are valid
inline void nudge_from_zero(Tensor& t, float margin = 0.05f) {
    for (auto& v : t.data())
        if (std::abs(v) < margin) v += (v >= 0 ? 2 * margin : -2 * margin);
}

inline std::map<std::string, OpResult> run(int instances, std::uint64_t seed = 20240817) {
    Rng rng(seed);
    std::map<std::string, OpResult> out;

    auto record = [&out](const std::string& name, const testutil::FdReport& rep) {
        auto& r = out[name];
        r.max_rel = std::max(r.max_rel, rep.max_rel);
        r.instances += 1;
        r.elements += rep.checked;
    };

    for (int it = 0; it < instances; ++it) {
        // conv2d with bias, stride in {1,2}
        {
            const int N = rng.uniform_int(1, 2), C = rng.uniform_int(1, 3), Co = rng.uniform_int(1, 3);
            const int H = rng.uniform_int(3, 6), W = rng.uniform_int(3, 6);
            const int k = 3, stride = rng.uniform_int(1, 2), pad = 1;
            std::vector<Tensor> in{rand_tensor({N, C, H, W}, rng), rand_tensor({Co, C, k, k}, rng),
                                   rand_tensor({Co}, rng)};
            int OH = 0, OW = 0;
            refops::conv2d(refops::to_double(in[0]), N, C, H, W, refops::to_double(in[1]), Co, k, nullptr,
                           stride, pad, OH, OW);
            auto w = rand_weights(static_cast<std::int64_t>(N) * Co * OH * OW, rng);
            record("conv2d", fd_check(
                                 in,
                                 [&] {
                                     return mitoseg::weighted_sum(
                                         mitoseg::conv2d(in[0], in[1], in[2], stride, pad), w);
                                 },
                                 [&](const std::vector<dvec>& x) {
                                     int oh, ow;
                                     auto y = refops::conv2d(x[0], N, C, H, W, x[1], Co, k, &x[2], stride,
                                                             pad, oh, ow);
                                     return ref_weighted(y, w);
                                 }));
        }
        // depthwise separable conv
        {
            const int N = 1, C = rng.uniform_int(1, 3), Co = rng.uniform_int(1, 3);
            const int H = rng.uniform_int(3, 5), W = rng.uniform_int(3, 5);
            const int stride = rng.uniform_int(1, 2);
            std::vector<Tensor> in{rand_tensor({N, C, H, W}, rng), rand_tensor({C, 1, 3, 3}, rng),
                                   rand_tensor({Co, C, 1, 1}, rng)};
            const int OH = (H + 2 - 3) / stride + 1, OW = (W + 2 - 3) / stride + 1;
            auto w = rand_weights(static_cast<std::int64_t>(N) * Co * OH * OW, rng);
            record("depthwise_separable_conv",
                   fd_check(
                       in,
                       [&] {
                           return mitoseg::weighted_sum(
                               mitoseg::depthwise_separable_conv(in[0], in[1], in[2], Tensor(), stride), w);
                       },
                       [&](const std::vector<dvec>& x) {
                           int oh, ow;
                           auto mid = refops::depthwise_conv2d(x[0], N, C, H, W, x[1], 3, stride, 1, oh, ow);
                           auto y = refops::conv2d(mid, N, C, oh, ow, x[2], Co, 1, nullptr, 1, 0, oh, ow);
                           return ref_weighted(y, w);
                       }));
        }
        // bilinear upsample
        {
            const int N = 1, C = rng.uniform_int(1, 3), H = rng.uniform_int(1, 4), W = rng.uniform_int(1, 4);
            std::vector<Tensor> in{rand_tensor({N, C, H, W}, rng)};
            auto w = rand_weights(static_cast<std::int64_t>(N) * C * 4 * H * W, rng);
            record("bilinear_upsample_2x",
                   fd_check(
                       in, [&] { return mitoseg::weighted_sum(mitoseg::bilinear_upsample_2x(in[0]), w); },
                       [&](const std::vector<dvec>& x) {
                           return ref_weighted(refops::bilinear_resize(x[0], N, C, H, W, 2 * H, 2 * W), w);
                       }));
        }
        // pooled reductions
        {
            const int N = 1, C = rng.uniform_int(2, 4), H = rng.uniform_int(2, 4), W = rng.uniform_int(2, 4);
            Tensor base = rand_tensor({N, C, H, W}, rng);
            // distinct values keep argmaxes isolated
            {
                int i = 0;
                for (auto& v : base.data()) v += 0.001f * static_cast<float>(i++ % 97);
            }
            const int HW = H * W;
            for (auto [kind, name, outn] :
                 {std::tuple{Reduce::global_avg, "pool_global_avg", N * C},
                  std::tuple{Reduce::global_max, "pool_global_max", N * C},
                  std::tuple{Reduce::channel_avg, "pool_channel_avg", N * HW},
                  std::tuple{Reduce::channel_max, "pool_channel_max", N * HW}}) {
                std::vector<Tensor> in{base.detach_copy()};
                auto w = rand_weights(outn, rng);
                auto kindv = kind;
                record(name, fd_check(
                                 in,
                                 [&] {
                                     return mitoseg::weighted_sum(mitoseg::pooled_reduction(in[0], kindv), w);
                                 },
                                 [&](const std::vector<dvec>& x) {
                                     dvec y;
                                     if (kindv == Reduce::global_avg || kindv == Reduce::global_max) {
                                         for (int c = 0; c < N * C; ++c) {
                                             double acc = kindv == Reduce::global_avg ? 0.0 : -1e300;
                                             for (int i = 0; i < HW; ++i) {
                                                 const double v = x[0][static_cast<std::size_t>(c) * HW + i];
                                                 if (kindv == Reduce::global_avg)
                                                     acc += v / HW;
                                                 else
                                                     acc = std::max(acc, v);
                                             }
                                             y.push_back(acc);
                                         }
                                     } else {
                                         for (int i = 0; i < HW; ++i) {
                                             double acc = kindv == Reduce::channel_avg ? 0.0 : -1e300;
                                             for (int c = 0; c < C; ++c) {
                                                 const double v = x[0][static_cast<std::size_t>(c) * HW + i];
                                                 if (kindv == Reduce::channel_avg)
                                                     acc += v / C;
                                                 else
                                                     acc = std::max(acc, v);
                                             }
                                             y.push_back(acc);
                                         }
                                     }
                                     return ref_weighted(y, w);
                                 }));
            }
        }
        // activations and scalar affine
        {
            const int n = rng.uniform_int(4, 24);
            Tensor base = rand_tensor({n}, rng);
            nudge_from_zero(base);
            for (auto [name, idx] : {std::pair{"relu", 0}, std::pair{"sigmoid", 1}, std::pair{"tanh", 2},
                                     std::pair{"affine", 3}}) {
                std::vector<Tensor> in{base.detach_copy()};
                auto w = rand_weights(n, rng);
                const int which = idx;
                record(name, fd_check(
                                 in,
                                 [&] {
                                     Tensor y = which == 0   ? mitoseg::relu(in[0])
                                                : which == 1 ? mitoseg::sigmoid(in[0])
                                                : which == 2 ? mitoseg::tanh(in[0])
                                                             : mitoseg::affine(in[0], -1.5f, 0.25f);
                                     return mitoseg::weighted_sum(y, w);
                                 },
                                 [&](const std::vector<dvec>& x) {
                                     dvec y(x[0].size());
                                     for (std::size_t i = 0; i < y.size(); ++i)
                                         y[i] = which == 0   ? std::max(0.0, x[0][i])
                                                : which == 1 ? 1.0 / (1.0 + std::exp(-x[0][i]))
                                                : which == 2 ? std::tanh(x[0][i])
                                                             : -1.5 * x[0][i] + 0.25;
                                     return ref_weighted(y, w);
                                 }));
            }
        }
        // add / sub / mul and broadcast multiplies
        {
            const int N = 1, C = rng.uniform_int(2, 3), H = rng.uniform_int(2, 4), W = rng.uniform_int(2, 4);
            const int HW = H * W;
            auto wfull = rand_weights(static_cast<std::int64_t>(C) * HW, rng);
            for (auto [name, mode] : {std::pair{"add", 0}, std::pair{"sub", 1}, std::pair{"mul", 2},
                                      std::pair{"mul_broadcast_channel", 3},
                                      std::pair{"mul_broadcast_spatial", 4}}) {
                Shape bshape = mode == 3 ? Shape{N, C, 1, 1} : mode == 4 ? Shape{N, 1, H, W} : Shape{N, C, H, W};
                std::vector<Tensor> in{rand_tensor({N, C, H, W}, rng), rand_tensor(bshape, rng)};
                const int m = mode;
                record(name,
                       fd_check(
                           in,
                           [&] {
                               Tensor y = m == 0   ? mitoseg::add(in[0], in[1])
                                          : m == 1 ? mitoseg::sub(in[0], in[1])
                                          : m == 2 ? mitoseg::mul(in[0], in[1])
                                                   : mitoseg::mul_broadcast(in[0], in[1]);
                               return mitoseg::weighted_sum(y, wfull);
                           },
                           [&](const std::vector<dvec>& x) {
                               dvec y(static_cast<std::size_t>(C) * HW);
                               for (int c = 0; c < C; ++c)
                                   for (int i = 0; i < HW; ++i) {
                                       const std::size_t ix = static_cast<std::size_t>(c) * HW + i;
                                       const double b = m == 3   ? x[1][static_cast<std::size_t>(c)]
                                                        : m == 4 ? x[1][static_cast<std::size_t>(i)]
                                                                 : x[1][ix];
                                       y[ix] = m == 0 ? x[0][ix] + b : m == 1 ? x[0][ix] - b : x[0][ix] * b;
                                   }
                               return ref_weighted(y, wfull);
                           }));
            }
        }
        // concat_channels
        {
            const int N = 1, H = rng.uniform_int(2, 3), W = rng.uniform_int(2, 3);
            const int C1 = rng.uniform_int(1, 2), C2 = rng.uniform_int(1, 3);
            std::vector<Tensor> in{rand_tensor({N, C1, H, W}, rng), rand_tensor({N, C2, H, W}, rng)};
            auto w = rand_weights(static_cast<std::int64_t>(C1 + C2) * H * W, rng);
            record("concat_channels",
                   fd_check(
                       in,
                       [&] { return mitoseg::weighted_sum(mitoseg::concat_channels({in[0], in[1]}), w); },
                       [&](const std::vector<dvec>& x) {
                           dvec y = x[0];
                           y.insert(y.end(), x[1].begin(), x[1].end());
                           return ref_weighted(y, w);
                       }));
        }
        // linear with bias
        {
            const int N = rng.uniform_int(1, 3), Fi = rng.uniform_int(2, 5), Fo = rng.uniform_int(1, 4);
            std::vector<Tensor> in{rand_tensor({N, Fi}, rng), rand_tensor({Fo, Fi}, rng),
                                   rand_tensor({Fo}, rng)};
            auto w = rand_weights(static_cast<std::int64_t>(N) * Fo, rng);
            record("linear", fd_check(
                                 in,
                                 [&] { return mitoseg::weighted_sum(mitoseg::linear(in[0], in[1], in[2]), w); },
                                 [&](const std::vector<dvec>& x) {
                                     dvec y(static_cast<std::size_t>(N) * Fo, 0.0);
                                     for (int n = 0; n < N; ++n)
                                         for (int f = 0; f < Fo; ++f) {
                                             double acc = x[2][static_cast<std::size_t>(f)];
                                             for (int i = 0; i < Fi; ++i)
                                                 acc += x[0][static_cast<std::size_t>(n) * Fi + i] *
                                                        x[1][static_cast<std::size_t>(f) * Fi + i];
                                             y[static_cast<std::size_t>(n) * Fo + f] = acc;
                                         }
                                     return ref_weighted(y, w);
                                 }));
        }
        // batchnorm2d, train mode
        {
            const int N = 2, C = rng.uniform_int(1, 3), H = rng.uniform_int(2, 3), W = rng.uniform_int(2, 3);
            std::vector<Tensor> in{rand_tensor({N, C, H, W}, rng), rand_tensor({C}, rng, 0.5, 1.5),
                                   rand_tensor({C}, rng)};
            auto w = rand_weights(static_cast<std::int64_t>(N) * C * H * W, rng);
            record("batchnorm2d",
                   fd_check(
                       in,
                       [&] {
                           Tensor rm = Tensor::zeros({C});
                           Tensor rv = Tensor::full({C}, 1.0f);
                           return mitoseg::weighted_sum(
                               mitoseg::batchnorm2d(in[0], in[1], in[2], rm, rv, true), w);
                       },
                       [&](const std::vector<dvec>& x) {
                           return ref_weighted(refops::batchnorm_train(x[0], N, C, H, W, x[1], x[2], 1e-5), w);
                       }));
        }
        // avg_pool_2x
        {
            const int N = 1, C = rng.uniform_int(1, 3), H = 2 * rng.uniform_int(1, 3), W = 2 * rng.uniform_int(1, 3);
            std::vector<Tensor> in{rand_tensor({N, C, H, W}, rng)};
            auto w = rand_weights(static_cast<std::int64_t>(N) * C * (H / 2) * (W / 2), rng);
            record("avg_pool_2x",
                   fd_check(
                       in, [&] { return mitoseg::weighted_sum(mitoseg::avg_pool_2x(in[0]), w); },
                       [&](const std::vector<dvec>& x) {
                           dvec y;
                           for (int c = 0; c < C; ++c)
                               for (int oy = 0; oy < H / 2; ++oy)
                                   for (int ox = 0; ox < W / 2; ++ox) {
                                       auto at = [&](int yy, int xx) {
                                           return x[0][(static_cast<std::size_t>(c) * H + yy) * W + xx];
                                       };
                                       y.push_back(0.25 * (at(2 * oy, 2 * ox) + at(2 * oy, 2 * ox + 1) +
                                                           at(2 * oy + 1, 2 * ox) + at(2 * oy + 1, 2 * ox + 1)));
                                   }
                           return ref_weighted(y, w);
                       }));
        }
    }
    return out;
}

}  // namespace gradsuite
