#pragma once

#include <vector>

#include "mitoseg/tensor.hpp"

namespace mitoseg {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam. Moments are float32 like the parameters;
// the per-element update is evaluated in double.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    AdamWConfig& config() { return cfg_; }
    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return t_; }

    void step(std::vector<Tensor>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].data().size(), 0.0f);
                v_[i].assign(params[i].data().size(), 0.0f);
            }
        }
        if (m_.size() != params.size()) throw ShapeError("adamw: parameter list changed between steps");
        ++t_;
        const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].data();
            auto g = params[i].grad();
            if (m_[i].size() != w.size())
                throw ShapeError("adamw: parameter " + std::to_string(i) + " changed shape between steps");
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j];
                if (!std::isfinite(gj)) throw NumericError("adamw: non-finite gradient encountered");
                const double mj = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
                m_[i][j] = static_cast<float>(mj);
                v_[i][j] = static_cast<float>(vj);
                const double mhat = mj / b1t;
                const double vhat = vj / b2t;
                double wj = w[j];
                wj -= cfg_.lr * cfg_.weight_decay * wj;  // decoupled decay
                wj -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                w[j] = static_cast<float>(wj);
            }
        }
    }

    void zero_grad(std::vector<Tensor>& params) {
        for (auto& p : params) p.zero_grad();
    }

private:
    AdamWConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace mitoseg
