#pragma once

#include "bussam/ops.hpp"

namespace bussam {

enum class LossReduction { Sum, Mean };

namespace detail {

template <typename T>
void check_loss_inputs(const Tensor<T>& p, const Tensor<T>& g, const char* op) {
    if (p.shape() != g.shape())
        throw UsageError(std::string(op) + ": prediction " + shape_str(p.shape()) +
                         " vs ground truth " + shape_str(g.shape()));
    for (T v : g.data())
        if (v != T(0) && v != T(1))
            throw UsageError(std::string(op) + ": ground truth must be binary {0,1}");
}

}  // namespace detail

// Binary cross entropy, -sum[ G log P + (1-G) log(1-P) ], with P clamped to
// [1e-7, 1-1e-7]. Mean reduction divides by the pixel count.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& g, LossReduction reduction) {
    detail::check_loss_inputs(p, g, "bce_loss");
    const T eps = static_cast<T>(1e-7);
    const std::int64_t n = p.numel();
    const T* pp = p.data().data();
    const T* pg = g.data().data();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        T pc = std::min(T(1) - eps, std::max(eps, pp[i]));
        acc -= pg[i] * std::log(pc) + (T(1) - pg[i]) * std::log(T(1) - pc);
    }
    const T w = reduction == LossReduction::Mean ? T(1) / static_cast<T>(n) : T(1);
    return make_op<T>("bce_loss", Shape{1}, std::vector<T>{acc * w}, {p, g},
                      [=](TensorImpl<T>* self) {
        auto ip = p.impl();
        return [=]() {
            if (!ip->requires_grad) return;
            ip->ensure_grad();
            const T go = self->grad[0] * w;
            for (std::int64_t i = 0; i < n; ++i) {
                T pc = std::min(T(1) - eps, std::max(eps, ip->val[i]));
                ip->grad[i] -= go * (pg[i] / pc - (T(1) - pg[i]) / (T(1) - pc));
            }
        };
    });
}

// Soft Dice loss, 1 - (2TP+1)/(2TP+FN+FP+1), with TP/FP/FN as soft counts
// TP = sum P*G, FP = sum P*(1-G), FN = sum (1-P)*G.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g) {
    detail::check_loss_inputs(p, g, "dice_loss");
    const std::int64_t n = p.numel();
    const T* pp = p.data().data();
    const T* pg = g.data().data();
    T tp = T(0), fp = T(0), fn = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        tp += pp[i] * pg[i];
        fp += pp[i] * (T(1) - pg[i]);
        fn += (T(1) - pp[i]) * pg[i];
    }
    const T a = T(2) * tp + T(1);
    const T b = T(2) * tp + fn + fp + T(1);
    return make_op<T>("dice_loss", Shape{1}, std::vector<T>{T(1) - a / b}, {p, g},
                      [=](TensorImpl<T>* self) {
        auto ip = p.impl();
        return [=]() {
            if (!ip->requires_grad) return;
            ip->ensure_grad();
            const T go = self->grad[0];
            // d/dp_i [1 - A/B] with dA/dp_i = 2 g_i and dB/dp_i = 1
            for (std::int64_t i = 0; i < n; ++i)
                ip->grad[i] -= go * (T(2) * pg[i] * b - a) / (b * b);
        };
    });
}

// beta * L_BCE(mean) + (1-beta) * L_Dice.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& p, const Tensor<T>& g, double beta) {
    if (beta < 0.0 || beta > 1.0)
        throw ConfigError("total_loss: beta must lie in [0,1], got " + std::to_string(beta));
    using namespace ops;
    if (beta == 0.0) return dice_loss(p, g);
    if (beta == 1.0) return bce_loss(p, g, LossReduction::Mean);
    return add(scale(bce_loss(p, g, LossReduction::Mean), beta),
               scale(dice_loss(p, g), 1.0 - beta));
}

}  // namespace bussam
