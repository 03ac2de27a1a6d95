#pragma once

#include "bussam/config.hpp"
#include "bussam/nn.hpp"

namespace bussam {

// Conv module: 3x3 conv (stride 1, pad 1) -> channel LayerNorm -> GELU.
// Spatial dims are preserved.
template <typename T>
struct ConvModule {
    Tensor<T> w, b, scale, shift;

    static ConvModule build(ParameterStore<T>& store, const std::string& prefix, int cin,
                            int cout, std::uint64_t seed, bool trainable = true) {
        ConvModule m;
        m.w = store.add(prefix + ".conv_w", init::kaiming<T>({cout, cin, 3, 3}, seed, prefix + ".conv_w"),
                        trainable);
        m.b = store.add(prefix + ".conv_b", init::zeros<T>({cout}), trainable);
        m.scale = store.add(prefix + ".ln_scale", init::ones<T>({cout}), trainable);
        m.shift = store.add(prefix + ".ln_shift", init::zeros<T>({cout}), trainable);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        using namespace ops;
        if (x.dim(1) != w.dim(1))
            throw ConfigError("ConvModule: input has " + std::to_string(x.dim(1)) +
                              " channels, params expect " + std::to_string(w.dim(1)));
        return gelu(normalize(conv2d(x, w, b, 1, 1), NormMode::Layer, 1, scale, shift));
    }
};

// Group multi-axis Hadamard Product Attention. The layer-normalized input is
// split into 4 equal channel groups; groups 1-3 are gated elementwise by
// attention maps built from low-resolution learnable parameter maps (bilinear
// upsampling to the (H,W), (C/4,H) and (C/4,W) axis pairs, then a depthwise
// 3x3 conv and a sigmoid); group 4 passes through a depthwise conv only.
// The re-concatenated groups are added back onto the input.
template <typename T>
struct GhpaModule {
    static constexpr int kGroups = 4;
    static constexpr int kMapBase = 16;

    Tensor<T> ln_scale, ln_shift;
    Tensor<T> p_hw, p_ch, p_cw;
    Tensor<T> dw_hw_w, dw_hw_b;
    Tensor<T> dw_ch_w, dw_ch_b;
    Tensor<T> dw_cw_w, dw_cw_b;
    Tensor<T> dw4_w, dw4_b;

    static GhpaModule build(ParameterStore<T>& store, const std::string& prefix, int channels,
                            std::uint64_t seed, bool trainable = true) {
        if (channels % kGroups != 0)
            throw ConfigError("GHPA: channels " + std::to_string(channels) +
                              " not divisible by " + std::to_string(kGroups));
        const int cg = channels / kGroups;
        auto n = [&](const char* s) { return prefix + "." + s; };
        GhpaModule m;
        m.ln_scale = store.add(n("ln_scale"), init::ones<T>({channels}), trainable);
        m.ln_shift = store.add(n("ln_shift"), init::zeros<T>({channels}), trainable);
        m.p_hw = store.add(n("p_hw"), init::normal<T>({1, cg, kMapBase, kMapBase}, 0.02, seed, n("p_hw")), trainable);
        m.p_ch = store.add(n("p_ch"), init::normal<T>({1, 1, kMapBase, kMapBase}, 0.02, seed, n("p_ch")), trainable);
        m.p_cw = store.add(n("p_cw"), init::normal<T>({1, 1, kMapBase, kMapBase}, 0.02, seed, n("p_cw")), trainable);
        m.dw_hw_w = store.add(n("dw_hw_w"), init::kaiming<T>({cg, 1, 3, 3}, seed, n("dw_hw_w")), trainable);
        m.dw_hw_b = store.add(n("dw_hw_b"), init::zeros<T>({cg}), trainable);
        m.dw_ch_w = store.add(n("dw_ch_w"), init::kaiming<T>({1, 1, 3, 3}, seed, n("dw_ch_w")), trainable);
        m.dw_ch_b = store.add(n("dw_ch_b"), init::zeros<T>({1}), trainable);
        m.dw_cw_w = store.add(n("dw_cw_w"), init::kaiming<T>({1, 1, 3, 3}, seed, n("dw_cw_w")), trainable);
        m.dw_cw_b = store.add(n("dw_cw_b"), init::zeros<T>({1}), trainable);
        m.dw4_w = store.add(n("dw4_w"), init::kaiming<T>({cg, 1, 3, 3}, seed, n("dw4_w")), trainable);
        m.dw4_b = store.add(n("dw4_b"), init::zeros<T>({cg}), trainable);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        using namespace ops;
        const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
        if (C % kGroups != 0)
            throw ConfigError("GHPA: input channels " + std::to_string(C) + " not divisible by 4");
        if (C / kGroups != p_hw.dim(1))
            throw ConfigError("GHPA: params built for " + std::to_string(p_hw.dim(1) * kGroups) +
                              " channels, input has " + std::to_string(C));
        const int cg = C / kGroups;

        Tensor<T> y = normalize(x, NormMode::Layer, 1, ln_scale, ln_shift);
        Tensor<T> x1 = narrow(y, 1, 0, cg);
        Tensor<T> x2 = narrow(y, 1, cg, cg);
        Tensor<T> x3 = narrow(y, 1, 2 * cg, cg);
        Tensor<T> x4 = narrow(y, 1, 3 * cg, cg);

        // (H,W) axis pair: per-group-channel spatial gate.
        Tensor<T> g1 = sigmoid(conv2d(bilinear_resize(p_hw, H, W), dw_hw_w, dw_hw_b, 1, 1, cg));
        // (C/4,H) axis pair: gate constant over W.
        Tensor<T> g2 = sigmoid(conv2d(bilinear_resize(p_ch, cg, H), dw_ch_w, dw_ch_b, 1, 1, 1));
        g2 = reshape(g2, {1, cg, H, 1});
        // (C/4,W) axis pair: gate constant over H.
        Tensor<T> g3 = sigmoid(conv2d(bilinear_resize(p_cw, cg, W), dw_cw_w, dw_cw_b, 1, 1, 1));
        g3 = reshape(g3, {1, cg, 1, W});

        Tensor<T> o1 = mul(x1, g1);
        Tensor<T> o2 = mul(x2, g2);
        Tensor<T> o3 = mul(x3, g3);
        Tensor<T> o4 = conv2d(x4, dw4_w, dw4_b, 1, 1, cg);
        return add(x, concat<T>({o1, o2, o3, o4}, 1));
    }
};

template <typename T>
struct CnnEncoderOutput {
    Tensor<T> f1;  // grid features after the GHPA stages
    Tensor<T> f2;  // f1 refined by one more Conv module
};

// The lightweight local-receptive-field branch: two Conv modules and two GHPA
// modules with stride-2 max pools in between, reducing a 1-channel SxS image
// to embed_dim x S/8 x S/8. Channel schedule: 1 -> C/4 -> C, then width-
// preserving GHPA stages.
template <typename T>
struct CnnEncoder {
    ConvModule<T> theta1, theta2, theta3;
    GhpaModule<T> ghpa1, ghpa2;

    static CnnEncoder build(ParameterStore<T>& store, const ModelConfig& cfg, std::uint64_t seed) {
        const int C = cfg.embed_dim;
        CnnEncoder e;
        e.theta1 = ConvModule<T>::build(store, "cnn.theta1", 1, C / 4, seed);
        e.theta2 = ConvModule<T>::build(store, "cnn.theta2", C / 4, C, seed);
        e.ghpa1 = GhpaModule<T>::build(store, "cnn.ghpa1", C, seed);
        e.ghpa2 = GhpaModule<T>::build(store, "cnn.ghpa2", C, seed);
        e.theta3 = ConvModule<T>::build(store, "cnn.theta3", C, C, seed);
        return e;
    }

    CnnEncoderOutput<T> forward(const Tensor<T>& image) const {
        using namespace ops;
        if (image.rank() != 4 || image.dim(1) != 1)
            throw UsageError("encode_cnn: expected Nx1xSxS image, got " + shape_str(image.shape()));
        const int S = image.dim(2);
        if (S % 8 != 0 || image.dim(3) != S)
            throw ConfigError("encode_cnn: image side must be square and divisible by 8, got " +
                              shape_str(image.shape()));
        Tensor<T> x = theta1.forward(image);
        x = pool_spatial(x, Reduce::Max, 2, 2);
        x = theta2.forward(x);
        x = pool_spatial(x, Reduce::Max, 2, 2);
        x = ghpa1.forward(x);
        x = pool_spatial(x, Reduce::Max, 2, 2);
        Tensor<T> f1 = ghpa2.forward(x);
        Tensor<T> f2 = theta3.forward(f1);
        return {f1, f2};
    }
};

}  // namespace bussam
