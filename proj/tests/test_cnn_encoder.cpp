// CNN branch: Conv module composition, GHPA gating semantics against an
// independent scalar oracle, encoder shape contracts, and gradient fidelity.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "bussam/cnn_encoder.hpp"
#include "doctest.h"

using namespace bussam;
using namespace bussam::ops;

namespace {

void randomize(ParameterStore<double>& store, std::uint64_t seed, double scale = 0.3) {
    for (auto& [name, entry] : store) {
        auto rng = rng_for(seed, name);
        std::normal_distribution<double> dist(0.0, scale);
        for (auto& v : entry.tensor.data()) v = dist(rng);
    }
}

Tensor<double> rand_input(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = dist(rng);
    return Tensor<double>(std::move(shape), std::move(v));
}

// --- plain-loop scalar helpers for the GHPA hand-trace oracle ---------------

std::vector<double> ln_volume(const std::vector<double>& x, int C, int HW,
                              const std::vector<double>& scale, const std::vector<double>& shift,
                              double eps = 1e-5) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= x.size();
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= x.size();
    std::vector<double> out(x.size());
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i)
            out[c * HW + i] = (x[c * HW + i] - mean) / std::sqrt(var + eps) * scale[c] + shift[c];
    return out;
}

// Depthwise 3x3, stride 1, pad 1, one map per channel.
std::vector<double> dwconv3(const std::vector<double>& x, int C, int H, int W,
                            const std::vector<double>& w, const std::vector<double>& b) {
    std::vector<double> out(x.size());
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double acc = b[c];
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int r = i + di, s = j + dj;
                        if (r < 0 || r >= H || s < 0 || s >= W) continue;
                        acc += x[(c * H + r) * W + s] * w[(c * 3 + di + 1) * 3 + dj + 1];
                    }
                out[(c * H + i) * W + j] = acc;
            }
    return out;
}

// Corner-aligned bilinear resample of a single (h,w) map.
std::vector<double> bilerp(const std::vector<double>& x, int h, int w, int oh, int ow) {
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    auto sample = [&](double r, double c) {
        const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(c));
        const int r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
        const double fr = r - r0, fc = c - c0;
        return (1 - fr) * ((1 - fc) * x[r0 * w + c0] + fc * x[r0 * w + c1]) +
               fr * ((1 - fc) * x[r1 * w + c0] + fc * x[r1 * w + c1]);
    };
    const double sr = oh > 1 ? double(h - 1) / (oh - 1) : 0.0;
    const double sc = ow > 1 ? double(w - 1) / (ow - 1) : 0.0;
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) out[i * ow + j] = sample(i * sr, j * sc);
    return out;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("conv_module equals conv2d + normalize + gelu called separately, bitwise") {
    // [DERIVED: composition oracle]
    ParameterStore<double> store;
    auto m = ConvModule<double>::build(store, "m", 3, 6, 42);
    randomize(store, 9);
    auto x = rand_input({2, 3, 5, 5}, 10);
    auto direct = m.forward(x);
    auto oracle = gelu(normalize(conv2d(x, store.get("m.conv_w"), store.get("m.conv_b"), 1, 1),
                                 NormMode::Layer, 1, store.get("m.ln_scale"), store.get("m.ln_shift")));
    CHECK(direct.data() == oracle.data());
}

TEST_CASE("conv_module with zero conv weights collapses to GELU(shift)") {
    // [TRIVIAL: zero-weight collapse]
    ParameterStore<double> store;
    auto m = ConvModule<double>::build(store, "m", 2, 3, 42);
    for (auto& v : store.get("m.conv_w").data()) v = 0.0;
    store.get("m.ln_shift").data() = {0.5, -1.0, 2.0};
    auto y = m.forward(rand_input({1, 2, 4, 4}, 11));
    for (int c = 0; c < 3; ++c) {
        const double want = gelu(Tensor<double>::scalar(store.get("m.ln_shift").data()[c])).item();
        for (int i = 0; i < 16; ++i)
            CHECK(y.data()[c * 16 + i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("conv_module rejects channel mismatch") {
    ParameterStore<double> store;
    auto m = ConvModule<double>::build(store, "m", 3, 4, 42);
    CHECK_THROWS_AS(m.forward(rand_input({1, 2, 4, 4}, 12)), ConfigError);
}

TEST_CASE("GHPA annihilation: zero gates and zero group-4 conv leave the residual") {
    // [TRIVIAL: attention annihilation + residual]
    ParameterStore<double> store;
    auto m = GhpaModule<double>::build(store, "g", 8, 42);
    // Huge negative dwconv biases drive every sigmoid gate to ~0; group 4's
    // depthwise conv is zeroed outright.
    for (const char* n : {"g.dw_hw_b", "g.dw_ch_b", "g.dw_cw_b"})
        for (auto& v : store.get(n).data()) v = -200.0;
    for (const char* n : {"g.dw_hw_w", "g.dw_ch_w", "g.dw_cw_w", "g.dw4_w", "g.dw4_b"})
        for (auto& v : store.get(n).data()) v = 0.0;
    auto x = rand_input({1, 8, 6, 6}, 13);
    auto y = m.forward(x);
    for (std::size_t i = 0; i < x.data().size(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("GHPA preserves shape") {
    // [TRIVIAL: shape preservation]
    ParameterStore<double> store;
    auto m = GhpaModule<double>::build(store, "g", 8, 42);
    auto y = m.forward(rand_input({1, 8, 32, 32}, 14));
    CHECK(y.shape() == Shape{1, 8, 32, 32});
}

TEST_CASE("GHPA rejects channel counts not divisible by 4") {
    ParameterStore<double> store;
    CHECK_THROWS_AS(GhpaModule<double>::build(store, "g", 6, 42), ConfigError);
}

TEST_CASE("GHPA matches an independent scalar hand-trace at C=4, H=W=2") {
    // [DERIVED: scalar hand-trace oracle built from plain loops]
    const int C = 4, H = 2, W = 2, cg = 1, B = GhpaModule<double>::kMapBase;
    ParameterStore<double> store;
    auto m = GhpaModule<double>::build(store, "g", C, 42);
    randomize(store, 21);
    auto x = rand_input({1, C, H, W}, 22);
    auto got = m.forward(x);

    const auto& xv = x.data();
    auto y = ln_volume(xv, C, H * W, store.get("g.ln_scale").data(), store.get("g.ln_shift").data());
    // Gates: resize the 16x16 parameter maps to the three axis pairs, then
    // depthwise conv + sigmoid.
    auto g1 = dwconv3(bilerp(store.get("g.p_hw").data(), B, B, H, W), cg, H, W,
                      store.get("g.dw_hw_w").data(), store.get("g.dw_hw_b").data());
    auto g2 = dwconv3(bilerp(store.get("g.p_ch").data(), B, B, cg, H), 1, cg, H,
                      store.get("g.dw_ch_w").data(), store.get("g.dw_ch_b").data());
    auto g3 = dwconv3(bilerp(store.get("g.p_cw").data(), B, B, cg, W), 1, cg, W,
                      store.get("g.dw_cw_w").data(), store.get("g.dw_cw_b").data());
    std::vector<double> want(xv.size());
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const int p = i * W + j;
            want[0 * 4 + p] = xv[0 * 4 + p] + y[0 * 4 + p] * sig(g1[p]);      // (H,W) gate
            want[1 * 4 + p] = xv[1 * 4 + p] + y[1 * 4 + p] * sig(g2[i]);      // (C/4,H): constant over W
            want[2 * 4 + p] = xv[2 * 4 + p] + y[2 * 4 + p] * sig(g3[j]);      // (C/4,W): constant over H
        }
    auto o4 = dwconv3({y.begin() + 12, y.end()}, cg, H, W, store.get("g.dw4_w").data(),
                      store.get("g.dw4_b").data());
    for (int p = 0; p < 4; ++p) want[3 * 4 + p] = xv[3 * 4 + p] + o4[p];
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(got.data()[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("encode_cnn shape contracts") {
    SUBCASE("toy size 64 -> 8x8 grids at embed_dim channels") {
        // [TRIVIAL: S/8 downsampling chain]
        ModelConfig cfg = ModelConfig::toy();
        ParameterStore<float> store;
        auto enc = CnnEncoder<float>::build(store, cfg, 42);
        NoGradGuard ng;
        auto out = enc.forward(Tensor<float>({2, 1, 64, 64}, 0.25f));
        CHECK(out.f1.shape() == Shape{2, 32, 8, 8});
        CHECK(out.f2.shape() == Shape{2, 32, 8, 8});
    }
    SUBCASE("default size 256 -> 32x32 grid") {
        // [PAPER: H=W=32 grid for the full configuration]
        ModelConfig cfg;  // defaults: 256 input, 768 channels
        ParameterStore<float> store;
        auto enc = CnnEncoder<float>::build(store, cfg, 42);
        NoGradGuard ng;
        auto out = enc.forward(Tensor<float>({1, 1, 256, 256}, 0.25f));
        CHECK(out.f1.shape() == Shape{1, 768, 32, 32});
        CHECK(out.f2.shape() == Shape{1, 768, 32, 32});
    }
    SUBCASE("non-square or indivisible sizes are rejected") {
        ModelConfig cfg = ModelConfig::toy();
        ParameterStore<float> store;
        auto enc = CnnEncoder<float>::build(store, cfg, 42);
        CHECK_THROWS_AS(enc.forward(Tensor<float>({1, 1, 60, 60}, 0.f)), ConfigError);
        CHECK_THROWS_AS(enc.forward(Tensor<float>({1, 1, 64, 56}, 0.f)), ConfigError);
        CHECK_THROWS_AS(enc.forward(Tensor<float>({1, 3, 64, 64}, 0.f)), UsageError);
    }
}

TEST_CASE("encoder forward is deterministic") {
    // [DERIVED: run-twice comparison]
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore<float> store;
    auto enc = CnnEncoder<float>::build(store, cfg, 7);
    auto img = Tensor<float>({1, 1, 64, 64});
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> dist(-1.f, 1.f);
    for (auto& v : img.data()) v = dist(rng);
    NoGradGuard ng;
    auto a = enc.forward(img);
    auto b = enc.forward(img);
    CHECK(a.f1.data() == b.f1.data());
    CHECK(a.f2.data() == b.f2.data());
}

TEST_CASE("GHPA and conv_module gradients match finite differences") {
    // [DERIVED: finite-difference oracle]
    ParameterStore<double> store;
    auto cm = ConvModule<double>::build(store, "cm", 2, 4, 42);
    auto gh = GhpaModule<double>::build(store, "gh", 4, 42);
    randomize(store, 31, 0.2);
    auto x = rand_input({1, 2, 4, 4}, 32);

    auto loss = [&] { return sum_all(mul(gh.forward(cm.forward(x)), gh.forward(cm.forward(x)))); };
    for (auto& [name, entry] : store) entry.tensor.zero_grad();
    backward(loss());
    const double h = 1e-6;
    for (auto& [name, entry] : store) {
        auto& val = entry.tensor.data();
        double worst = 0.0;
        for (std::size_t i = 0; i < val.size(); i += std::max<std::size_t>(1, val.size() / 6)) {
            const double orig = val[i];
            NoGradGuard ng;
            val[i] = orig + h;
            const double lp = loss().item();
            val[i] = orig - h;
            const double lm = loss().item();
            val[i] = orig;
            const double fd = (lp - lm) / (2 * h);
            const double an = entry.tensor.has_grad() ? entry.tensor.grad()[i] : 0.0;
            worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
        }
        INFO("parameter ", name);
        CHECK(worst < 1e-4);
    }
}
