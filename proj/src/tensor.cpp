#include "whittle/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace whittle::ndgrad {

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

namespace detail {

void fail(const std::string& message) { throw std::runtime_error(message); }

std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void guard_finite(const std::vector<float>& values, const char* op_name) {
    for (float v : values) {
        if (!std::isfinite(v)) {
            fail(std::string(op_name) + ": non-finite value in output");
        }
    }
}

Tensor make_result(std::vector<int64_t> shape, std::vector<float> data,
                   const std::vector<Tensor>& inputs, const char* op_name,
                   std::function<void(TensorImpl&)> backprop) {
    guard_finite(data, op_name);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (static_cast<int64_t>(impl->data.size()) != impl->numel()) {
        fail(std::string(op_name) + ": internal shape/data size mismatch");
    }
    bool needs_grad = false;
    for (const Tensor& t : inputs) {
        if (t.defined() && t.requires_grad()) needs_grad = true;
    }
    if (needs_grad && grad_enabled()) {
        impl->requires_grad = true;
        auto node = std::make_shared<TapeNode>();
        node->op_name = op_name;
        for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
        node->backprop = std::move(backprop);
        impl->producer = std::move(node);
    }
    return Tensor(impl);
}

}  // namespace detail

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, float value, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    for (int64_t d : impl->shape) {
        if (d <= 0) detail::fail("tensor: non-positive extent in shape " +
                                 detail::shape_str(impl->shape));
    }
    impl->data.assign(static_cast<size_t>(impl->numel()), value);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<float> values, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    if (static_cast<int64_t>(impl->data.size()) != impl->numel()) {
        detail::fail("tensor: data length " + std::to_string(impl->data.size()) +
                     " does not match shape " + detail::shape_str(impl->shape));
    }
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::scalar(double value) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = {1};
    impl->data = {static_cast<float>(value)};
    impl->scalar64 = value;
    return Tensor(impl);
}

double Tensor::value() const {
    if (numel() != 1) {
        detail::fail("value(): tensor has " + std::to_string(numel()) + " elements, expected 1");
    }
    if (impl_->scalar64) return *impl_->scalar64;
    return static_cast<double>(impl_->data[0]);
}

void backward(const Tensor& loss) {
    if (!loss.defined()) detail::fail("backward: undefined tensor");
    if (loss.numel() != 1) {
        detail::fail("backward: loss must be scalar, got shape " +
                     detail::shape_str(loss.shape()));
    }
    TensorImplPtr root = loss.impl();
    if (!root->requires_grad) {
        detail::fail("backward: loss does not require grad (no recorded tape)");
    }
    if (!root->producer) {
        // Leaf loss: gradient of itself is one.
        root->ensure_grad();
        root->grad[0] += 1.0f;
        return;
    }
    if (root->producer->consumed) {
        detail::fail("backward: tape already consumed; re-run the forward pass first");
    }

    // Post-order DFS over producer links; reversed order is topological.
    std::vector<TensorImplPtr> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImplPtr impl;
        size_t next_input = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& node = f.impl->producer;
        if (!node || f.next_input >= node->inputs.size()) {
            if (node) order.push_back(f.impl);
            stack.pop_back();
            continue;
        }
        TensorImplPtr in = node->inputs[f.next_input++];
        if (in->requires_grad && in->producer && !visited.count(in.get())) {
            if (in->producer->consumed) {
                detail::fail("backward: tape already consumed; re-run the forward pass first");
            }
            visited.insert(in.get());
            stack.push_back({in});
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl& out = **it;
        out.ensure_grad();
        out.producer->backprop(out);
        out.producer->consumed = true;
        out.producer->backprop = nullptr;  // release saved intermediates
    }
}

}  // namespace whittle::ndgrad
