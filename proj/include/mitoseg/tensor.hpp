#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>

#include "mitoseg/core.hpp"

namespace mitoseg {

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

// One node of the reverse-mode tape. Leaves have no parents; interior nodes
// carry a closure that scatters this node's grad into its parents' grads.
struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // sized lazily, same length as data when present
    bool requires_grad = false;
    std::vector<TensorImplPtr> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    bool on_tape() const { return requires_grad || !parents.empty(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording in scope; inference paths use this so intermediate
// activations are released as soon as they go out of scope.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0f); }

    static Tensor full(Shape shape, float value) {
        auto impl = std::make_shared<TensorImpl>();
        const auto n = ::mitoseg::numel(shape);
        require_shape(n >= 0, "tensor shape has negative extent " + shape_str(shape));
        impl->shape = std::move(shape);
        impl->data.assign(static_cast<std::size_t>(n), value);
        return Tensor(impl);
    }

    static Tensor from(Shape shape, std::vector<float> values) {
        auto impl = std::make_shared<TensorImpl>();
        require_shape(::mitoseg::numel(shape) == static_cast<std::int64_t>(values.size()),
                      "data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        return Tensor(impl);
    }

    static Tensor scalar(float value) { return full({1}, value); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return impl_->size(); }

    std::span<float> data() { return impl_->data; }
    std::span<const float> data() const { return impl_->data; }
    float item() const {
        require_shape(impl_->size() == 1, "item() requires a single-element tensor, got " + shape_str(impl_->shape));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        return *this;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<float> grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    std::span<const float> grad() const { return impl_->grad; }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }

    TensorImpl* impl() const { return impl_.get(); }
    const TensorImplPtr& ptr() const { return impl_; }

    // Detached value copy (no tape, no grad).
    Tensor detach_copy() const {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = impl_->shape;
        impl->data = impl_->data;
        return Tensor(impl);
    }

    bool finite() const {
        for (float v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    TensorImplPtr impl_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<TensorImplPtr> parents,
                          std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    const auto n = ::mitoseg::numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<std::size_t>(n), 0.0f);
    bool record = grad_enabled();
    if (record) {
        record = false;
        for (const auto& p : parents)
            if (p->on_tape()) record = true;
    }
    if (record) {
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

inline void topo_visit(TensorImpl* node, std::unordered_set<TensorImpl*>& seen,
                       std::vector<TensorImpl*>& order) {
    // Iterative DFS; graphs here can be a few thousand nodes deep.
    struct Frame {
        TensorImpl* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack{{node, 0}};
    seen.insert(node);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->parents.size()) {
            TensorImpl* child = f.node->parents[f.next_child++].get();
            if (!seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Grad buffers accumulate across calls
// until zero_grad(); leaves keep their gradients, interior buffers are freed.
inline void backward(const Tensor& loss) {
    require_shape(loss.numel() == 1, "backward() requires a scalar loss, got " + shape_str(loss.shape()));
    if (!std::isfinite(loss.item())) throw NumericError("backward() called on non-finite loss");
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> order;
    detail::topo_visit(loss.impl(), seen, order);

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (TensorImpl* node : order) {
        if (!node->requires_grad) node->grad = {};
    }
}

}  // namespace mitoseg
