#pragma once

#include <map>
#include <string>

#include "bussam/common.hpp"

namespace bussam {

// All architecture hyperparameters. Defaults give the full-size network
// (256x256 input, 768-dim, 12 blocks); tests use the toy variant.
struct ModelConfig {
    int input_size = 256;
    int embed_dim = 768;
    int patch = 8;
    int vit_blocks = 12;
    int heads = 12;
    int adapter_ratio = 4;   // bottleneck reduction r for Feature Adapter and CBA
    double cba_alpha = 0.5;  // scaling factor on the CBA output
    int cba_every = 1;       // inject a CBA after every cba_every-th block
    double loss_beta = 0.2;  // BCE weight in the total loss
    bool use_cnn = true;
    bool use_pos_adapter = true;
    bool use_cba = true;

    int token_grid() const { return input_size / patch; }

    static ModelConfig toy() {
        ModelConfig c;
        c.input_size = 64;
        c.embed_dim = 32;
        c.vit_blocks = 2;
        c.heads = 2;
        return c;
    }

    void validate() const {
        std::string errs;
        auto fail = [&](const std::string& m) {
            if (!errs.empty()) errs += "; ";
            errs += m;
        };
        if (input_size < 8 || input_size % 8 != 0)
            fail("input_size must be a positive multiple of 8, got " + std::to_string(input_size));
        if (patch < 1 || input_size % patch != 0) fail("input_size must be divisible by patch");
        if (embed_dim < 32 || embed_dim % 32 != 0)
            fail("embed_dim must be a positive multiple of 32, got " + std::to_string(embed_dim));
        if (heads < 1 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
        if (adapter_ratio < 1 || adapter_ratio > embed_dim)
            fail("adapter_ratio must be in [1, embed_dim]");
        if (!(cba_alpha >= 0.0) || !std::isfinite(cba_alpha))
            fail("cba_alpha must be finite and non-negative");
        if (cba_every < 1) fail("cba_every must be >= 1");
        if (loss_beta < 0.0 || loss_beta > 1.0) fail("loss_beta must lie in [0,1]");
        if (vit_blocks < 1) fail("vit_blocks must be >= 1");
        if (use_cba && !use_cnn) fail("use_cba requires use_cnn (the CBA fuses the CNN branch)");
        if (!errs.empty()) throw ConfigError("invalid model config: " + errs);
    }
};

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 0.1;
    int batch = 8;
    int epochs = 100;
    int warmup_steps = -1;  // <0: 5% of total steps
    std::uint64_t seed = 42;
    ModelConfig model;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (batch < 1) throw ConfigError("batch must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        model.validate();
    }
};

// Plain-text `key = value` config files, '#' starts a comment. Unknown keys
// are an error so typos fail loudly.
TrainConfig parse_config_file(const std::string& path);
TrainConfig parse_config_text(const std::string& text, const std::string& origin);

std::map<std::string, std::string> config_to_kv(const TrainConfig& cfg);
ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv);

}  // namespace bussam
