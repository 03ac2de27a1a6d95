#pragma once

#include "bussam/cnn_encoder.hpp"

namespace bussam {

// Tokens are (N, T, C); the grid view is (N, C, g, g) with T = g*g.
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
    using namespace ops;
    const int N = grid.dim(0), C = grid.dim(1), g = grid.dim(2);
    return reshape(permute(grid, {0, 2, 3, 1}), {N, g * grid.dim(3), C});
}

template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, int g) {
    using namespace ops;
    const int N = tokens.dim(0), C = tokens.dim(2);
    if (tokens.dim(1) != g * g) throw UsageError("tokens_to_grid: token count is not g*g");
    return permute(reshape(tokens, {N, g, g, C}), {0, 3, 1, 2});
}

// Non-overlapping pxp patch projection (a pxp conv with stride p). Frozen.
template <typename T>
struct PatchEmbed {
    Tensor<T> w, b;
    int patch = 8;

    static PatchEmbed build(ParameterStore<T>& store, const ModelConfig& cfg, std::uint64_t seed) {
        PatchEmbed m;
        m.patch = cfg.patch;
        m.w = store.add("patch_embed.weight",
                        init::kaiming<T>({cfg.embed_dim, 1, cfg.patch, cfg.patch}, seed,
                                         "patch_embed.weight"),
                        /*trainable=*/false);
        m.b = store.add("patch_embed.bias", init::zeros<T>({cfg.embed_dim}), false);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& image) const {
        if (image.dim(2) % patch != 0 || image.dim(3) % patch != 0)
            throw ConfigError("patch_embed: image side " + std::to_string(image.dim(2)) +
                              " not divisible by patch " + std::to_string(patch));
        return ops::conv2d(image, w, b, patch, 0);
    }
};

// Position Adapter: GELU(GN(GHPA(MaxPool_2(P)))). The stored embedding grid is
// twice the token grid so the stride-2 max pool lands exactly on it.
template <typename T>
struct PositionAdapter {
    static constexpr int kGnGroups = 8;
    GhpaModule<T> ghpa;
    Tensor<T> gn_scale, gn_shift;

    static PositionAdapter build(ParameterStore<T>& store, const ModelConfig& cfg,
                                 std::uint64_t seed) {
        PositionAdapter m;
        m.ghpa = GhpaModule<T>::build(store, "pos_adapter.ghpa", cfg.embed_dim, seed);
        m.gn_scale = store.add("pos_adapter.gn_scale", init::ones<T>({cfg.embed_dim}), true);
        m.gn_shift = store.add("pos_adapter.gn_shift", init::zeros<T>({cfg.embed_dim}), true);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& pos, int token_grid) const {
        using namespace ops;
        if (pos.dim(2) % 2 != 0 || pos.dim(3) % 2 != 0)
            throw ConfigError("position_adapter: embedding grid side must be even");
        if (pos.dim(2) / 2 != token_grid)
            throw ConfigError("position_adapter: pooled grid " + std::to_string(pos.dim(2) / 2) +
                              " does not match token grid " + std::to_string(token_grid));
        Tensor<T> p = pool_spatial(pos, Reduce::Max, 2, 2);
        p = ghpa.forward(p);
        p = normalize(p, NormMode::Group, kGnGroups, gn_scale, gn_shift);
        return gelu(p);
    }
};

// Bottleneck residual insert: up(GELU(down(x))). Returns the increment; the
// caller adds it. Up-projection starts at zero so a fresh model computes the
// frozen backbone's function exactly.
template <typename T>
struct FeatureAdapter {
    Tensor<T> down_w, down_b, up_w, up_b;

    static FeatureAdapter build(ParameterStore<T>& store, const std::string& prefix,
                                int channels, int ratio, std::uint64_t seed) {
        const int bottleneck = std::max(1, channels / ratio);
        FeatureAdapter m;
        m.down_w = store.add(prefix + ".down_w",
                             init::normal<T>({bottleneck, channels}, 0.02, seed, prefix + ".down_w"), true);
        m.down_b = store.add(prefix + ".down_b", init::zeros<T>({bottleneck}), true);
        m.up_w = store.add(prefix + ".up_w", init::zeros<T>({channels, bottleneck}), true);
        m.up_b = store.add(prefix + ".up_b", init::zeros<T>({channels}), true);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        using namespace ops;
        return linear(gelu(linear(x, down_w, down_b)), up_w, up_b);
    }
};

// Pre-norm transformer block with the Feature Adapter on the second residual:
//   x <- x + MHSA(LN1(x))
//   x <- x + MLP(LN2(x)) + adapter(LN2(x))
// Block weights are frozen; only the adapter trains.
template <typename T>
struct VitBlock {
    Tensor<T> ln1_scale, ln1_shift, ln2_scale, ln2_shift;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    FeatureAdapter<T> adapter;
    int heads = 1;

    static VitBlock build(ParameterStore<T>& store, const ModelConfig& cfg, int index,
                          std::uint64_t seed) {
        const int C = cfg.embed_dim;
        const std::string p = "vit.block" + std::to_string(index);
        auto n = [&](const char* s) { return p + "." + s; };
        auto frozen_normal = [&](const char* s, Shape shape) {
            return store.add(n(s), init::normal<T>(std::move(shape), 0.02, seed, n(s)), false);
        };
        VitBlock m;
        m.heads = cfg.heads;
        m.ln1_scale = store.add(n("ln1_scale"), init::ones<T>({C}), false);
        m.ln1_shift = store.add(n("ln1_shift"), init::zeros<T>({C}), false);
        m.ln2_scale = store.add(n("ln2_scale"), init::ones<T>({C}), false);
        m.ln2_shift = store.add(n("ln2_shift"), init::zeros<T>({C}), false);
        m.wq = frozen_normal("attn_wq", {C, C});
        m.bq = store.add(n("attn_bq"), init::zeros<T>({C}), false);
        m.wk = frozen_normal("attn_wk", {C, C});
        m.bk = store.add(n("attn_bk"), init::zeros<T>({C}), false);
        m.wv = frozen_normal("attn_wv", {C, C});
        m.bv = store.add(n("attn_bv"), init::zeros<T>({C}), false);
        m.wo = frozen_normal("attn_wo", {C, C});
        m.bo = store.add(n("attn_bo"), init::zeros<T>({C}), false);
        m.mlp_w1 = frozen_normal("mlp_w1", {4 * C, C});
        m.mlp_b1 = store.add(n("mlp_b1"), init::zeros<T>({4 * C}), false);
        m.mlp_w2 = frozen_normal("mlp_w2", {C, 4 * C});
        m.mlp_b2 = store.add(n("mlp_b2"), init::zeros<T>({C}), false);
        m.adapter = FeatureAdapter<T>::build(store, "feat_adapter.block" + std::to_string(index),
                                             C, cfg.adapter_ratio, seed);
        return m;
    }

    // Multi-head self-attention over tokens (N, T, C).
    Tensor<T> attention(const Tensor<T>& x) const {
        using namespace ops;
        const int N = x.dim(0), Tk = x.dim(1), C = x.dim(2);
        if (C % heads != 0)
            throw ConfigError("attention: embed dim " + std::to_string(C) +
                              " not divisible by heads " + std::to_string(heads));
        const int hd = C / heads;
        auto split_heads = [&](const Tensor<T>& t) {
            return permute(reshape(t, {N, Tk, heads, hd}), {0, 2, 1, 3});  // (N,h,T,d)
        };
        Tensor<T> q = split_heads(linear(x, wq, bq));
        Tensor<T> k = split_heads(linear(x, wk, bk));
        Tensor<T> v = split_heads(linear(x, wv, bv));
        Tensor<T> logits = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(double(hd)));
        Tensor<T> attn = softmax_lastdim(logits);  // rows sum to 1
        Tensor<T> ctx = matmul(attn, v);           // (N,h,T,d)
        ctx = reshape(permute(ctx, {0, 2, 1, 3}), {N, Tk, C});
        return linear(ctx, wo, bo);
    }

    Tensor<T> forward(const Tensor<T>& x, bool skip_adapter = false) const {
        using namespace ops;
        Tensor<T> h = add(x, attention(normalize(x, NormMode::Layer, 1, ln1_scale, ln1_shift)));
        Tensor<T> n2 = normalize(h, NormMode::Layer, 1, ln2_scale, ln2_shift);
        Tensor<T> mlp = linear(gelu(linear(n2, mlp_w1, mlp_b1)), mlp_w2, mlp_b2);
        Tensor<T> out = add(h, mlp);
        if (!skip_adapter) out = add(out, adapter.forward(n2));
        return out;
    }
};

}  // namespace bussam
