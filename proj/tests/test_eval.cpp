// Supervision and evaluation: BCE/Dice loss values and gradients against
// hand computations, beta mixing, and the five metrics against exhaustive
// pixel-count / all-pairs boundary oracles.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>
#include <sstream>

#include "bussam/losses.hpp"
#include "bussam/metrics.hpp"
#include "doctest.h"

using namespace bussam;

namespace {

BinaryMask random_mask(int h, int w, std::uint64_t seed, double p_fg = 0.35) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution fg(p_fg);
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.v.resize(static_cast<std::size_t>(h) * w);
    for (auto& v : m.v) v = fg(rng) ? 1 : 0;
    return m;
}

// Independent plain-loop boundary + all-pairs Hausdorff oracle.
double hd_oracle(const BinaryMask& a, const BinaryMask& b, double spacing) {
    auto boundary = [](const BinaryMask& m) {
        std::vector<std::pair<int, int>> out;
        for (int r = 0; r < m.h; ++r)
            for (int c = 0; c < m.w; ++c) {
                if (!m.at(r, c)) continue;
                const bool edge =
                    r == 0 || r == m.h - 1 || c == 0 || c == m.w - 1 || !m.at(r - 1, c) ||
                    !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
                if (edge) out.push_back({r, c});
            }
        return out;
    };
    auto directed = [](const std::vector<std::pair<int, int>>& from,
                       const std::vector<std::pair<int, int>>& to) {
        double worst = 0;
        for (auto [r, c] : from) {
            double best = 1e300;
            for (auto [r2, c2] : to)
                best = std::min(best, std::hypot(double(r - r2), double(c - c2)));
            worst = std::max(worst, best);
        }
        return worst;
    };
    auto ba = boundary(a), bb = boundary(b);
    return std::max(directed(ba, bb), directed(bb, ba)) * spacing;
}

}  // namespace

TEST_CASE("BCE values") {
    SUBCASE("P = 0.5 everywhere gives ln 2 per pixel") {
        // [DERIVED: closed form -log(0.5)]
        Tensor<double> p({2, 3}, 0.5);
        Tensor<double> g({2, 3}, {0, 1, 0, 1, 1, 0});
        CHECK(bce_loss(p, g, LossReduction::Mean).item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK(bce_loss(p, g, LossReduction::Sum).item() ==
              doctest::Approx(6 * std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("random case matches the plain-loop formula") {
        // [DERIVED: scalar formula oracle]
        std::mt19937_64 rng(1);
        std::uniform_real_distribution<double> u(0.05, 0.95);
        Tensor<double> p({10}), g({10});
        for (auto& v : p.data()) v = u(rng);
        for (auto& v : g.data()) v = rng() % 2;
        double want = 0;
        for (int i = 0; i < 10; ++i)
            want -= g.data()[i] * std::log(p.data()[i]) +
                    (1 - g.data()[i]) * std::log(1 - p.data()[i]);
        CHECK(bce_loss(p, g, LossReduction::Sum).item() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("perfect binary prediction costs less than 1e-5 per pixel") {
        // [DERIVED: clamp bound -log(1-1e-7)]
        Tensor<double> g({4}, {0, 1, 1, 0});
        CHECK(bce_loss(g.clone_detached(), g, LossReduction::Mean).item() < 1e-5);
    }
    SUBCASE("gradient matches -(g/p - (1-g)/(1-p)) and finite differences") {
        // [DERIVED: analytic + finite-difference oracle]
        Tensor<double> p({3}, {0.3, 0.8, 0.5});
        Tensor<double> g({3}, {1, 0, 1});
        p.set_requires_grad(true);
        backward(bce_loss(p, g, LossReduction::Sum));
        CHECK(p.grad()[0] == doctest::Approx(-1.0 / 0.3).epsilon(1e-9));
        CHECK(p.grad()[1] == doctest::Approx(1.0 / 0.2).epsilon(1e-9));
        const double h = 1e-7;
        NoGradGuard ng;
        for (int i = 0; i < 3; ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + h;
            const double lp = bce_loss(p, g, LossReduction::Sum).item();
            p.data()[i] = orig - h;
            const double lm = bce_loss(p, g, LossReduction::Sum).item();
            p.data()[i] = orig;
            CHECK(p.grad()[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
        }
    }
    SUBCASE("shape and binarity validation") {
        Tensor<double> p({2}, 0.5), g3({3}, 0.0), gbad({2}, {0.0, 0.5});
        CHECK_THROWS_AS(bce_loss(p, g3, LossReduction::Mean), UsageError);
        CHECK_THROWS_AS(bce_loss(p, gbad, LossReduction::Mean), UsageError);
    }
}

TEST_CASE("Dice loss values") {
    SUBCASE("perfect binary prediction gives exactly zero") {
        // [DERIVED: (2TP+1)/(2TP+1) = 1 exactly, smoothing included]
        Tensor<double> g({5}, {1, 0, 1, 1, 0});
        CHECK(dice_loss(g.clone_detached(), g).item() == 0.0);
    }
    SUBCASE("all-zero prediction on 5 positives gives 5/6") {
        // [DERIVED: 1 - 1/(5+1)]
        Tensor<double> p({8}, 0.0);
        Tensor<double> g({8}, {1, 1, 1, 1, 1, 0, 0, 0});
        CHECK(dice_loss(p, g).item() == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    }
    SUBCASE("soft-count formula matches a plain-loop oracle") {
        // [DERIVED: scalar formula oracle]
        std::mt19937_64 rng(2);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Tensor<double> p({20}), g({20});
        for (auto& v : p.data()) v = u(rng);
        for (auto& v : g.data()) v = rng() % 2;
        double tp = 0, fp = 0, fn = 0;
        for (int i = 0; i < 20; ++i) {
            tp += p.data()[i] * g.data()[i];
            fp += p.data()[i] * (1 - g.data()[i]);
            fn += (1 - p.data()[i]) * g.data()[i];
        }
        CHECK(dice_loss(p, g).item() ==
              doctest::Approx(1 - (2 * tp + 1) / (2 * tp + fn + fp + 1)).epsilon(1e-12));
    }
    SUBCASE("gradient matches finite differences") {
        // [DERIVED: finite-difference oracle]
        Tensor<double> p({6}, {0.2, 0.9, 0.4, 0.7, 0.1, 0.6});
        Tensor<double> g({6}, {1, 1, 0, 0, 1, 0});
        p.set_requires_grad(true);
        backward(dice_loss(p, g));
        const double h = 1e-7;
        NoGradGuard ng;
        for (int i = 0; i < 6; ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + h;
            const double lp = dice_loss(p, g).item();
            p.data()[i] = orig - h;
            const double lm = dice_loss(p, g).item();
            p.data()[i] = orig;
            CHECK(p.grad()[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
        }
    }
}

TEST_CASE("total loss mixing") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    Tensor<double> p({12}), g({12});
    for (auto& v : p.data()) v = u(rng);
    for (auto& v : g.data()) v = rng() % 2;
    SUBCASE("beta endpoints are exact passthroughs") {
        // [DERIVED: endpoint identity]
        CHECK(total_loss(p, g, 1.0).item() == bce_loss(p, g, LossReduction::Mean).item());
        CHECK(total_loss(p, g, 0.0).item() == dice_loss(p, g).item());
    }
    SUBCASE("interior beta is the affine combination") {
        // [DERIVED: affine identity at the default beta = 0.2]
        const double want = 0.2 * bce_loss(p, g, LossReduction::Mean).item() +
                            0.8 * dice_loss(p, g).item();
        CHECK(total_loss(p, g, 0.2).item() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("invalid beta is rejected") {
        CHECK_THROWS_AS(total_loss(p, g, -0.1), ConfigError);
        CHECK_THROWS_AS(total_loss(p, g, 1.5), ConfigError);
    }
}

TEST_CASE("confusion counts and ratio metrics match exhaustive oracles") {
    // [DERIVED: exhaustive pixel-count oracle on random masks]
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto pred = random_mask(16, 16, 1000 + seed);
        auto gt = random_mask(16, 16, 2000 + seed);
        std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
        for (int i = 0; i < 256; ++i) {
            tp += pred.v[i] && gt.v[i];
            tn += !pred.v[i] && !gt.v[i];
            fp += pred.v[i] && !gt.v[i];
            fn += !pred.v[i] && gt.v[i];
        }
        auto c = confusion(pred, gt);
        CHECK(c.tp == tp);
        CHECK(c.tn == tn);
        CHECK(c.fp == fp);
        CHECK(c.fn == fn);
        auto m = segmentation_metrics(pred, gt, 1.0);
        CHECK(m.acc == 100.0 * (tp + tn) / 256.0);
        if (tp + fn > 0) CHECK(m.se == 100.0 * tp / double(tp + fn));
        CHECK(m.dice == 100.0 * 2 * tp / double(2 * tp + fp + fn));
        CHECK(m.iou == 100.0 * tp / double(tp + fp + fn));
        // Dice = 2 IoU / (1 + IoU) exactly, shown at the integer-count level:
        // 2*(tp/(tp+fp+fn)) / (1 + tp/(tp+fp+fn)) = 2tp/(2tp+fp+fn).
        CHECK(2 * tp * (2 * tp + fp + fn) == 2 * tp * (tp + fp + fn) + 2 * tp * tp + 0);
    }
}

TEST_CASE("Hausdorff distance") {
    SUBCASE("two single pixels at (0,0) and (3,4) give 5") {
        // [DERIVED: 3-4-5 triangle]
        BinaryMask a = random_mask(6, 6, 0, 0.0), b = a;
        a.at(0, 0) = 1;
        b.at(3, 4) = 1;
        CHECK(hausdorff(a, b, 1.0) == doctest::Approx(5.0).epsilon(1e-12));
        CHECK(hausdorff(a, b, 0.5) == doctest::Approx(2.5).epsilon(1e-12));
    }
    SUBCASE("identical masks give zero") {
        // [TRIVIAL]
        auto a = random_mask(12, 12, 5);
        CHECK(hausdorff(a, a, 1.0) == 0.0);
    }
    SUBCASE("random masks match the all-pairs boundary oracle") {
        // [DERIVED: O(n^2) all-pairs oracle]
        for (std::uint64_t seed = 0; seed < 15; ++seed) {
            auto a = random_mask(16, 16, 3000 + seed, 0.4);
            auto b = random_mask(16, 16, 4000 + seed, 0.4);
            if (a.empty_mask() || b.empty_mask()) continue;
            CHECK(hausdorff(a, b, 1.0) == doctest::Approx(hd_oracle(a, b, 1.0)).epsilon(1e-9));
        }
    }
    SUBCASE("symmetry") {
        auto a = random_mask(10, 10, 6, 0.3);
        auto b = random_mask(10, 10, 7, 0.3);
        CHECK(hausdorff(a, b, 1.0) == hausdorff(b, a, 1.0));
    }
}

TEST_CASE("boundary pixels follow the 4-connectivity definition") {
    // [DERIVED: definition oracle; out-of-bounds neighbors are background]
    auto m = random_mask(9, 9, 8, 0.5);
    auto got = boundary_pixels(m);
    std::vector<std::pair<int, int>> want;
    for (int r = 0; r < 9; ++r)
        for (int c = 0; c < 9; ++c) {
            if (!m.at(r, c)) continue;
            const bool edge = r == 0 || r == 8 || c == 0 || c == 8 || !m.at(r - 1, c) ||
                              !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
            if (edge) want.push_back({r, c});
        }
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    CHECK(got == want);
}

TEST_CASE("empty-mask conventions") {
    BinaryMask empty = random_mask(8, 8, 0, 0.0);
    BinaryMask some = empty;
    some.at(2, 2) = some.at(2, 3) = 1;
    SUBCASE("both empty: perfect scores, zero distance") {
        // [TRIVIAL: convention]
        auto m = segmentation_metrics(empty, empty, 1.0);
        CHECK(m.acc == 100.0);
        CHECK(m.se == 100.0);
        CHECK(m.dice == 100.0);
        CHECK(m.iou == 100.0);
        CHECK(m.hd == 0.0);
    }
    SUBCASE("one empty: count ratios plus diagonal-penalty distance") {
        // [DERIVED: convention — HD = image diagonal * spacing]
        auto m = segmentation_metrics(empty, some, 2.0);
        CHECK(m.se == 0.0);
        CHECK(m.dice == 0.0);
        CHECK(m.iou == 0.0);
        CHECK(m.hd == doctest::Approx(std::hypot(7.0, 7.0) * 2.0).epsilon(1e-12));
    }
    SUBCASE("ground truth as its own prediction is perfect") {
        // [TRIVIAL: oracle input]
        auto m = segmentation_metrics(some, some, 1.0);
        CHECK(m.acc == 100.0);
        CHECK(m.se == 100.0);
        CHECK(m.dice == 100.0);
        CHECK(m.iou == 100.0);
        CHECK(m.hd == 0.0);
    }
}

TEST_CASE("metrics CSV format") {
    // [TRIVIAL: format contract — header, one row per image, MEAN row, 4 decimals]
    MetricsReport r;
    r.per_image.push_back({"img_a", 98.0, 90.0, 85.5, 74.67, 3.25});
    r.per_image.push_back({"img_b", 96.0, 80.0, 75.5, 60.0, 5.0});
    r.mean = aggregate_mean(r.per_image);
    std::istringstream csv(metrics_csv(r));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "image,acc,se,dice,iou,hd_mm");
    std::getline(csv, line);
    CHECK(line == "img_a,98.0000,90.0000,85.5000,74.6700,3.2500");
    std::getline(csv, line);
    CHECK(line == "img_b,96.0000,80.0000,75.5000,60.0000,5.0000");
    std::getline(csv, line);
    CHECK(line == "MEAN,97.0000,85.0000,80.5000,67.3350,4.1250");
    CHECK_FALSE(std::getline(csv, line));
}
