#pragma once

#include <optional>
#include <string>

#include "mitoseg/checkpoint.hpp"
#include "mitoseg/nn_ops.hpp"

namespace mitoseg {

namespace detail {

inline Tensor he_init(Shape shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double stddev = std::sqrt(2.0 / std::max(1, fan_in));
    for (auto& v : t.data()) v = static_cast<float>(rng.normal(0.0, stddev));
    return t;
}

}  // namespace detail

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1;
    int pad = 0;

    static Conv2dLayer make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, int k,
                            int stride, bool bias, Rng& rng) {
        Conv2dLayer l;
        l.stride = stride;
        l.pad = (k - 1) / 2;
        l.w = reg.param(name + ".w", detail::he_init({out_ch, in_ch, k, k}, in_ch * k * k, rng));
        if (bias) l.b = reg.param(name + ".b", Tensor::zeros({out_ch}));
        return l;
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct BatchNormLayer {
    Tensor gamma, beta, run_mean, run_var;
    bool enabled = true;

    static BatchNormLayer make(ParamRegistry& reg, const std::string& name, int channels, bool enabled) {
        BatchNormLayer l;
        l.enabled = enabled;
        if (enabled) {
            l.gamma = reg.param(name + ".gamma", Tensor::full({channels}, 1.0f));
            l.beta = reg.param(name + ".beta", Tensor::zeros({channels}));
            l.run_mean = reg.buffer(name + ".running_mean", Tensor::zeros({channels}));
            l.run_var = reg.buffer(name + ".running_var", Tensor::full({channels}, 1.0f));
        }
        return l;
    }

    Tensor forward(const Tensor& x, bool training) {
        if (!enabled) return x;
        return batchnorm2d(x, gamma, beta, run_mean, run_var, training);
    }
};

// Depthwise 3x3 + pointwise 1x1, batchnorm-free by itself.
struct DSCLayer {
    Tensor dw, pw, pb;
    int stride = 1;

    static DSCLayer make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, int stride,
                         bool bias, Rng& rng) {
        DSCLayer l;
        l.stride = stride;
        l.dw = reg.param(name + ".dw", detail::he_init({in_ch, 1, 3, 3}, 9, rng));
        l.pw = reg.param(name + ".pw", detail::he_init({out_ch, in_ch, 1, 1}, in_ch, rng));
        if (bias) l.pb = reg.param(name + ".pb", Tensor::zeros({out_ch}));
        return l;
    }

    Tensor forward(const Tensor& x) const { return depthwise_separable_conv(x, dw, pw, pb, stride); }
};

struct LinearLayer {
    Tensor w, b;

    static LinearLayer make(ParamRegistry& reg, const std::string& name, int in_f, int out_f, Rng& rng) {
        LinearLayer l;
        l.w = reg.param(name + ".w", detail::he_init({out_f, in_f}, in_f, rng));
        l.b = reg.param(name + ".b", Tensor::zeros({out_f}));
        return l;
    }

    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

}  // namespace mitoseg
