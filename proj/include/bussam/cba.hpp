#pragma once

#include "bussam/config.hpp"
#include "bussam/nn.hpp"

namespace bussam {

// Cross-Branch Adapter. Fuses the two branch features by channel-pooled
// spatial attention over their sum:
//   S      = F_v + F_c
//   W      = sigmoid(conv7x7(concat(chan_max(S), chan_mean(S)), pad 3))
//   Htilde = W (.) S
//   out    = alpha * h2(GELU(h1(Htilde)))
// h1/h2 act on the channel vector at each spatial position; h2 starts at zero
// so the CBA is an exact no-op inside the surrounding residual additions.
template <typename T>
struct CrossBranchAdapter {
    Tensor<T> conv_w, conv_b;  // (1, 2, 7, 7)
    Tensor<T> h1_w, h1_b;      // C -> C/r
    Tensor<T> h2_w, h2_b;      // C/r -> C
    double alpha = 0.5;

    static CrossBranchAdapter build(ParameterStore<T>& store, const std::string& prefix,
                                    int channels, int ratio, double alpha, std::uint64_t seed) {
        const int bottleneck = std::max(1, channels / ratio);
        CrossBranchAdapter m;
        m.alpha = alpha;
        m.conv_w = store.add(prefix + ".conv_w",
                             init::kaiming<T>({1, 2, 7, 7}, seed, prefix + ".conv_w"), true);
        m.conv_b = store.add(prefix + ".conv_b", init::zeros<T>({1}), true);
        m.h1_w = store.add(prefix + ".h1_w",
                           init::normal<T>({bottleneck, channels}, 0.02, seed, prefix + ".h1_w"), true);
        m.h1_b = store.add(prefix + ".h1_b", init::zeros<T>({bottleneck}), true);
        m.h2_w = store.add(prefix + ".h2_w", init::zeros<T>({channels, bottleneck}), true);
        m.h2_b = store.add(prefix + ".h2_b", init::zeros<T>({channels}), true);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& f_v, const Tensor<T>& f_c) const {
        using namespace ops;
        if (f_v.shape() != f_c.shape())
            throw ConfigError("cba: input shapes differ, " + shape_str(f_v.shape()) + " vs " +
                              shape_str(f_c.shape()));
        const int N = f_v.dim(0), C = f_v.dim(1), H = f_v.dim(2), W = f_v.dim(3);
        Tensor<T> s = add(f_v, f_c);
        Tensor<T> h_max = pool_channel(s, Reduce::Max);
        Tensor<T> h_mean = pool_channel(s, Reduce::Mean);
        Tensor<T> w = sigmoid(conv2d(concat<T>({h_max, h_mean}, 1), conv_w, conv_b, 1, 3));
        Tensor<T> ht = mul(s, w);  // w broadcasts over channels
        // channel-wise bottleneck at each spatial position: move C last
        Tensor<T> tok = reshape(permute(ht, {0, 2, 3, 1}), {N, H * W, C});
        Tensor<T> out = linear(gelu(linear(tok, h1_w, h1_b)), h2_w, h2_b);
        out = permute(reshape(out, {N, H, W, C}), {0, 3, 1, 2});
        return scale(out, alpha);
    }
};

}  // namespace bussam
