#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace whittle::ndgrad {

class TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

/// One executed primitive on the tape: the inputs it read and a closure that
/// routes the output gradient back into them.
struct TapeNode {
    std::vector<TensorImplPtr> inputs;
    std::function<void(TensorImpl& out)> backprop;
    const char* op_name = "";
    bool consumed = false;
};

class TensorImpl {
  public:
    std::vector<int64_t> shape;
    std::vector<float> data;        // row-major, contiguous
    std::vector<float> grad;        // same layout as data once allocated
    bool requires_grad = false;
    std::shared_ptr<TapeNode> producer;  // null for leaves
    // Reductions keep their exact result here so scalar losses can be read
    // back at full precision (finite-difference tests depend on it).
    std::optional<double> scalar64;

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

/// Dense float32 tensor with reverse-mode autodiff. Value type over a shared
/// impl; the tape is rebuilt on every forward pass (define-by-run).
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, float value, bool requires_grad = false);
    static Tensor from(std::vector<int64_t> shape, std::vector<float> values,
                       bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int64_t>& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    int64_t dim(size_t i) const { return impl_->shape[i]; }
    size_t ndim() const { return impl_->shape.size(); }

    std::vector<float>& data() { return impl_->data; }
    const std::vector<float>& data() const { return impl_->data; }
    float at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    /// Exact value of a 1-element tensor (double mirror when produced by a
    /// reduction, otherwise the stored float).
    double value() const;

    const std::vector<float>& grad() const { return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    TensorImplPtr impl() const { return impl_; }

  private:
    TensorImplPtr impl_;
};

/// Runs the backward pass from a scalar loss: one reverse traversal of the
/// tape in topological order, accumulating gradients into every
/// requires_grad leaf. The traversed tape is consumed; calling backward on
/// it again throws.
void backward(const Tensor& loss);

/// RAII guard that disables tape recording (evaluation passes).
class NoGrad {
  public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

bool grad_enabled();

namespace detail {
[[noreturn]] void fail(const std::string& message);
std::string shape_str(const std::vector<int64_t>& shape);
void guard_finite(const std::vector<float>& values, const char* op_name);
Tensor make_result(std::vector<int64_t> shape, std::vector<float> data,
                   const std::vector<Tensor>& inputs, const char* op_name,
                   std::function<void(TensorImpl&)> backprop);
}  // namespace detail

}  // namespace whittle::ndgrad
