#pragma once

#include <cmath>

#include "mitoseg/nn_ops.hpp"

namespace mitoseg {

namespace detail {

inline void check_binary_target(const Tensor& target) {
    for (float v : target.data())
        if (v != 0.0f && v != 1.0f)
            throw ShapeError("loss target must be a binary mask, found value " + std::to_string(v));
}

}  // namespace detail

// Mean binary cross entropy. Predictions are clipped to [eps, 1-eps] before
// the logs; reductions accumulate in double.
inline Tensor bce_loss(const Tensor& pred, const Tensor& target, float eps = 1e-7f) {
    detail::check_same_shape(pred, target, "bce_loss");
    detail::check_binary_target(target);
    auto p = pred.ptr();
    auto g = target.ptr();
    const double n = static_cast<double>(pred.numel());
    Tensor out = detail::make_result({1}, {p, g}, [p, g, eps, n](TensorImpl& self) {
        if (!p->on_tape()) return;
        p->ensure_grad();
        const double scale = static_cast<double>(self.grad[0]) / n;
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            float pv = p->data[i];
            const bool clipped = pv < eps || pv > 1.0f - eps;
            if (clipped) continue;  // clip region has zero slope
            const double gv = g->data[i];
            p->grad[i] += static_cast<float>(scale * (-(gv / pv) + (1.0 - gv) / (1.0 - pv)));
        }
    });
    double acc = 0.0;
    const float lo = eps, hi = 1.0f - eps;
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
        double pv = pred.data()[i];
        if (pv < lo) pv = lo;
        if (pv > hi) pv = hi;
        const double gv = target.data()[i];
        acc -= gv * std::log(pv) + (1.0 - gv) * std::log(1.0 - pv);
    }
    out.data()[0] = static_cast<float>(acc / n);
    return out;
}

// Soft-count Tversky loss: 1 - (TP + s) / (TP + alpha*FP + beta*FN + s)
// with TP = sum(p*g), FP = sum(p*(1-g)), FN = sum((1-p)*g).
inline Tensor tversky_loss(const Tensor& pred, const Tensor& target, float alpha = 0.3f,
                           float beta = 0.7f, float smooth = 1.0f) {
    if (alpha < 0.0f || beta < 0.0f) throw ConfigError("tversky_loss: alpha and beta must be non-negative");
    detail::check_same_shape(pred, target, "tversky_loss");
    detail::check_binary_target(target);
    auto p = pred.ptr();
    auto g = target.ptr();

    double tp = 0.0, fp = 0.0, fn = 0.0;
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
        const double pv = pred.data()[i];
        const double gv = target.data()[i];
        tp += pv * gv;
        fp += pv * (1.0 - gv);
        fn += (1.0 - pv) * gv;
    }
    const double num = tp + smooth;
    const double den = tp + alpha * fp + beta * fn + smooth;

    Tensor out = detail::make_result({1}, {p, g}, [p, g, alpha, beta, num, den](TensorImpl& self) {
        if (!p->on_tape()) return;
        p->ensure_grad();
        // d(loss)/dp_i = -(num' * den - num * den') / den^2 with
        // num' = g_i, den' = g_i + alpha*(1-g_i) - beta*g_i
        const double gscale = static_cast<double>(self.grad[0]);
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double gv = g->data[i];
            const double dnum = gv;
            const double dden = gv + alpha * (1.0 - gv) - beta * gv;
            p->grad[i] += static_cast<float>(gscale * (-(dnum * den - num * dden) / (den * den)));
        }
    });
    out.data()[0] = static_cast<float>(1.0 - num / den);
    return out;
}

// w_a * a + w_b * b on scalar losses, evaluated in double.
inline Tensor weighted_scalar_sum(const Tensor& a, float wa, const Tensor& b, float wb) {
    require_shape(a.numel() == 1 && b.numel() == 1, "weighted_scalar_sum expects scalars");
    auto pa = a.ptr();
    auto pb = b.ptr();
    Tensor out = detail::make_result({1}, {pa, pb}, [pa, pb, wa, wb](TensorImpl& self) {
        if (pa->on_tape()) {
            pa->ensure_grad();
            pa->grad[0] += self.grad[0] * wa;
        }
        if (pb->on_tape()) {
            pb->ensure_grad();
            pb->grad[0] += self.grad[0] * wb;
        }
    });
    out.data()[0] = static_cast<float>(static_cast<double>(wa) * a.data()[0] +
                                       static_cast<double>(wb) * b.data()[0]);
    return out;
}

struct CombinedLossConfig {
    float bce_weight = 0.3f;
    float tversky_weight = 0.7f;
    float alpha = 0.3f;
    float beta = 0.7f;
    float smooth = 1.0f;
};

inline Tensor combined_loss(const Tensor& pred, const Tensor& target, const CombinedLossConfig& cfg = {}) {
    Tensor bce = bce_loss(pred, target);
    Tensor tv = tversky_loss(pred, target, cfg.alpha, cfg.beta, cfg.smooth);
    return weighted_scalar_sum(bce, cfg.bce_weight, tv, cfg.tversky_weight);
}

}  // namespace mitoseg
