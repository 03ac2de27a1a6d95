#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>

#include "bussam/common.hpp"

namespace bussam {

// Thread-local autograd state. Forward passes under NoGradGuard build no
// graph; finite checking throws NumericError naming the first offending op.
struct AutogradState {
    static thread_local bool grad_enabled;
    static thread_local bool check_finite;
};

inline thread_local bool AutogradState::grad_enabled = true;
inline thread_local bool AutogradState::check_finite = false;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(AutogradState::grad_enabled) { AutogradState::grad_enabled = false; }
    ~NoGradGuard() { AutogradState::grad_enabled = prev; }
};

struct FiniteCheckGuard {
    bool prev;
    explicit FiniteCheckGuard(bool on = true) : prev(AutogradState::check_finite) {
        AutogradState::check_finite = on;
    }
    ~FiniteCheckGuard() { AutogradState::check_finite = prev; }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // lazily allocated
    bool requires_grad = false;
    bool is_leaf = false;
    std::uint64_t seq = 0;
    const char* op_name = "leaf";
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), T(0));
    }
};

// Value-semantics handle over a node in the differentiation graph. Copies are
// cheap and alias the same storage. Leaves with requires_grad=true accumulate
// into .grad during backward(); interior nodes are transient.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) {
        check_shape_valid(shape, "Tensor");
        impl_ = std::make_shared<TensorImpl<T>>();
        impl_->shape = std::move(shape);
        impl_->val.assign(static_cast<std::size_t>(bussam::numel(impl_->shape)), fill);
        impl_->seq = next_seq();
    }

    Tensor(Shape shape, std::vector<T> data) {
        check_shape_valid(shape, "Tensor");
        if (static_cast<std::int64_t>(data.size()) != bussam::numel(shape))
            throw ConfigError("Tensor: data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        impl_ = std::make_shared<TensorImpl<T>>();
        impl_->shape = std::move(shape);
        impl_->val = std::move(data);
        impl_->seq = next_seq();
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->val.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }

    std::vector<T>& data() { return impl_->val; }
    const std::vector<T>& data() const { return impl_->val; }
    std::vector<T>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw UsageError("item(): tensor is not scalar");
        return impl_->val[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        impl_->is_leaf = true;
        return *this;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

    // Deep copy of values, detached from the graph.
    Tensor clone_detached() const { return Tensor(impl_->shape, impl_->val); }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
inline void check_finite_or_throw(const TensorImpl<T>& t) {
    if (!AutogradState::check_finite) return;
    for (const T& v : t.val)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by op '") + t.op_name + "'");
}

// Construct the result node of a primitive. `make_backward` is only invoked
// when a graph is actually being recorded; it receives the raw result impl and
// returns the closure run during the backward sweep.
template <typename T, typename MakeBackward>
Tensor<T> make_op(const char* name, Shape out_shape, std::vector<T> out_val,
                  std::vector<Tensor<T>> parents, MakeBackward&& make_backward) {
    Tensor<T> out(std::move(out_shape), std::move(out_val));
    auto impl = out.impl();
    impl->op_name = name;
    check_finite_or_throw(*impl);
    if (AutogradState::grad_enabled) {
        bool needs = false;
        for (const auto& p : parents)
            if (p.impl()->requires_grad) needs = true;
        if (needs) {
            impl->requires_grad = true;
            for (const auto& p : parents) impl->parents.push_back(p.impl());
            impl->backward_fn = make_backward(impl.get());
        }
    }
    return out;
}

// Reverse sweep: visits recorded ops in exact reverse execution order
// (descending creation sequence over the reachable subgraph).
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw UsageError("backward(): loss must be scalar");
    if (!loss.impl()->requires_grad) return;

    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> seen;
    std::vector<std::shared_ptr<TensorImpl<T>>> stack{loss.impl()};
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto node = stack.back();
        stack.pop_back();
        order.push_back(node.get());
        for (auto& p : node->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](const TensorImpl<T>* a, const TensorImpl<T>* b) { return a->seq > b->seq; });

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = T(1);
    for (TensorImpl<T>* node : order)
        if (node->backward_fn) node->backward_fn();
    // Interior grads are scratch; drop them so only leaves keep accumulations.
    for (TensorImpl<T>* node : order)
        if (!node->is_leaf) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
}

}  // namespace bussam
