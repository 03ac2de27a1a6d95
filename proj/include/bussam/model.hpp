#pragma once

#include <optional>

#include "bussam/cba.hpp"
#include "bussam/vit_branch.hpp"

namespace bussam {

// Decoder head: three (bilinear x2 upsample -> Conv module) stages thinning
// channels C -> C/8 -> C/16 -> C/32, then a 1x1 conv and a sigmoid. This is a
// trainable stand-in head, not a reimplementation of any pretrained decoder.
template <typename T>
struct Decoder {
    ConvModule<T> stage1, stage2, stage3;
    Tensor<T> head_w, head_b;

    static Decoder build(ParameterStore<T>& store, const ModelConfig& cfg, std::uint64_t seed) {
        const int C = cfg.embed_dim;
        Decoder d;
        d.stage1 = ConvModule<T>::build(store, "decoder.stage1", C, C / 8, seed);
        d.stage2 = ConvModule<T>::build(store, "decoder.stage2", C / 8, C / 16, seed);
        d.stage3 = ConvModule<T>::build(store, "decoder.stage3", C / 16, C / 32, seed);
        d.head_w = store.add("decoder.head_w", init::kaiming<T>({1, C / 32, 1, 1}, seed, "decoder.head_w"), true);
        d.head_b = store.add("decoder.head_b", init::zeros<T>({1}), true);
        return d;
    }

    Tensor<T> forward(const Tensor<T>& e) const {
        using namespace ops;
        Tensor<T> x = stage1.forward(bilinear_resize(e, e.dim(2) * 2, e.dim(3) * 2));
        x = stage2.forward(bilinear_resize(x, x.dim(2) * 2, x.dim(3) * 2));
        x = stage3.forward(bilinear_resize(x, x.dim(2) * 2, x.dim(3) * 2));
        return sigmoid(conv2d(x, head_w, head_b, 1, 0));
    }
};

// The full network. Trainable partition: cnn.*, pos_adapter.*, feat_adapter.*,
// cba.* and decoder.*; vit.*, pos_embed and patch_embed.* stay frozen.
template <typename T>
struct BussamModel {
    ModelConfig cfg;
    ParameterStore<T> store;

    std::optional<CnnEncoder<T>> cnn;
    PatchEmbed<T> patch_embed;
    Tensor<T> pos_embed;  // (1, C, 2g, 2g)
    std::optional<PositionAdapter<T>> pos_adapter;
    std::vector<VitBlock<T>> blocks;
    std::vector<std::optional<CrossBranchAdapter<T>>> cbas;  // per block, engaged at injection points
    Decoder<T> decoder;

    bool cba_after(int block_index) const {
        return cfg.use_cba && cfg.use_cnn && (block_index + 1) % cfg.cba_every == 0;
    }
};

template <typename T>
BussamModel<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BussamModel<T> m;
    m.cfg = cfg;
    const int g = cfg.token_grid();
    if (cfg.use_cnn) m.cnn = CnnEncoder<T>::build(m.store, cfg, seed);
    m.patch_embed = PatchEmbed<T>::build(m.store, cfg, seed);
    m.pos_embed = m.store.add("pos_embed",
                              init::normal<T>({1, cfg.embed_dim, 2 * g, 2 * g}, 0.02, seed, "pos_embed"),
                              /*trainable=*/false);
    if (cfg.use_pos_adapter) m.pos_adapter = PositionAdapter<T>::build(m.store, cfg, seed);
    for (int i = 0; i < cfg.vit_blocks; ++i) m.blocks.push_back(VitBlock<T>::build(m.store, cfg, i, seed));
    m.cbas.resize(static_cast<std::size_t>(cfg.vit_blocks));
    for (int i = 0; i < cfg.vit_blocks; ++i)
        if (m.cba_after(i))
            m.cbas[i] = CrossBranchAdapter<T>::build(m.store, "cba.block" + std::to_string(i),
                                                     cfg.embed_dim, cfg.adapter_ratio,
                                                     cfg.cba_alpha, seed);
    m.decoder = Decoder<T>::build(m.store, cfg, seed);
    return m;
}

// Forward pass producing the probability map (N,1,S,S) in (0,1).
// `adapter_free` skips the Feature Adapter increments and the CBA injections,
// leaving everything else identical; a freshly built model (zero-init
// up-projections) computes the same function either way.
template <typename T>
Tensor<T> model_forward(const BussamModel<T>& m, const Tensor<T>& image,
                        bool adapter_free = false) {
    using namespace ops;
    const int S = m.cfg.input_size, g = m.cfg.token_grid();
    if (image.rank() != 4 || image.dim(1) != 1 || image.dim(2) != S || image.dim(3) != S)
        throw UsageError("forward: expected Nx1x" + std::to_string(S) + "x" + std::to_string(S) +
                         " image, got " + shape_str(image.shape()));

    CnnEncoderOutput<T> cnn_out;
    if (m.cfg.use_cnn) cnn_out = m.cnn->forward(image);

    Tensor<T> z = m.patch_embed.forward(image);  // (N,C,g,g)
    Tensor<T> pos_term = m.cfg.use_pos_adapter
                             ? m.pos_adapter->forward(m.pos_embed, g)
                             : pool_spatial(m.pos_embed, Reduce::Max, 2, 2);
    Tensor<T> x = grid_to_tokens(add(z, pos_term));

    for (int i = 0; i < m.cfg.vit_blocks; ++i) {
        x = m.blocks[i].forward(x, /*skip_adapter=*/adapter_free);
        if (!adapter_free && m.cba_after(i)) {
            Tensor<T> grid = tokens_to_grid(x, g);
            grid = add(grid, m.cbas[i]->forward(grid, cnn_out.f1));
            x = grid_to_tokens(grid);
        }
    }

    Tensor<T> e = tokens_to_grid(x, g);
    if (m.cfg.use_cnn) e = add(e, cnn_out.f2);
    return m.decoder.forward(e);
}

// The freeze partition, by parameter name.
template <typename T>
std::set<std::string> trainable_parameters(const ParameterStore<T>& store) {
    return store.trainable_names();
}

// ---------------------------------------------------------------------------
// Checkpoint: "BUSSAMCKPT" magic, format version, config key-values, then
// per-parameter records (name, rank, dims, little-endian f32 data, trainable
// flag byte). Round-trips bit-exactly for float stores.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "BUSSAMCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParameterStore<float>& store);
BussamModel<float> load_checkpoint(const std::string& path);

}  // namespace bussam
