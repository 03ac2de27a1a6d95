#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>

#include "bussam/data.hpp"
#include "bussam/losses.hpp"
#include "bussam/model.hpp"

namespace bussam {

// Warmup + linear decay: 0 at step 0, peak at warmup_steps, back to 0 at
// total_steps.
struct LrSchedule {
    int warmup_steps = 1;
    int total_steps = 1;
    double peak = 5e-4;

    double at(int step) const {
        if (step <= 0) return 0.0;
        if (step < warmup_steps) return peak * step / warmup_steps;
        if (step >= total_steps) return 0.0;
        return peak * static_cast<double>(total_steps - step) / (total_steps - warmup_steps);
    }
};

// Adam with decoupled weight decay, applied only to the trainable partition.
template <typename T>
class AdamW {
public:
    AdamW(ParameterStore<T>& store, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& [name, entry] : store)
            if (entry.trainable) {
                State s;
                s.tensor = entry.tensor;
                s.m.assign(entry.tensor.data().size(), 0.0);
                s.v.assign(entry.tensor.data().size(), 0.0);
                states_.push_back(std::move(s));
            }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& s : states_) {
            auto& val = s.tensor.data();
            const bool has_grad = s.tensor.has_grad();
            for (std::size_t i = 0; i < val.size(); ++i) {
                const double g = has_grad ? static_cast<double>(s.tensor.grad()[i]) : 0.0;
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                val[i] = static_cast<T>(val[i] - lr * (mhat / (std::sqrt(vhat) + eps_) +
                                                       weight_decay_ * val[i]));
            }
        }
    }

    void zero_grad() {
        for (auto& s : states_) s.tensor.zero_grad();
    }

private:
    struct State {
        Tensor<T> tensor;
        std::vector<double> m, v;
    };
    std::vector<State> states_;
    double weight_decay_, beta1_, beta2_, eps_;
    int t_ = 0;
};

// --- batch assembly ----------------------------------------------------------

template <typename T>
Tensor<T> batch_images(const std::vector<SamplePair>& samples) {
    const int S = samples.at(0).image.h;
    const int N = static_cast<int>(samples.size());
    std::vector<T> data;
    data.reserve(static_cast<std::size_t>(N) * S * S);
    for (const auto& s : samples)
        for (float v : s.image.v) data.push_back(static_cast<T>(v));
    return Tensor<T>({N, 1, S, S}, std::move(data));
}

template <typename T>
Tensor<T> batch_masks(const std::vector<SamplePair>& samples) {
    const int S = samples.at(0).mask.h;
    const int N = static_cast<int>(samples.size());
    std::vector<T> data;
    data.reserve(static_cast<std::size_t>(N) * S * S);
    for (const auto& s : samples)
        for (std::uint8_t v : s.mask.v) data.push_back(static_cast<T>(v));
    return Tensor<T>({N, 1, S, S}, std::move(data));
}

inline BinaryMask threshold_prob_map(const Tensor<float>& prob, int batch_index) {
    const int S = prob.dim(2);
    BinaryMask m;
    m.h = m.w = S;
    m.v.resize(static_cast<std::size_t>(S) * S);
    const float* p = prob.data().data() + static_cast<std::int64_t>(batch_index) * S * S;
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = p[i] >= 0.5f ? 1 : 0;
    return m;
}

// --- evaluation --------------------------------------------------------------

// Forward + 0.5 threshold + five metrics per preprocessed sample.
inline MetricsReport evaluate_samples(const BussamModel<float>& model,
                                      const std::vector<SamplePair>& samples,
                                      const std::string& save_mask_dir = "") {
    NoGradGuard ng;
    MetricsReport report;
    for (const auto& s : samples) {
        Tensor<float> prob = model_forward(model, batch_images<float>({s}));
        BinaryMask pred = threshold_prob_map(prob, 0);
        report.per_image.push_back(segmentation_metrics(pred, s.mask, s.spacing_mm, s.id));
        if (!save_mask_dir.empty())
            save_mask_pgm(pred, (std::filesystem::path(save_mask_dir) / (s.id + "_pred.pgm")).string());
    }
    report.mean = aggregate_mean(report.per_image);
    return report;
}

// --- training ----------------------------------------------------------------

struct TrainResult {
    std::vector<double> epoch_loss;  // mean total loss per epoch
    std::vector<double> val_dice;    // mean test-split Dice per epoch (percent)
    std::string log_csv;             // "epoch,mean_loss,val_dice" rows
    int best_epoch = -1;
};

inline std::vector<SamplePair> load_preprocessed(const std::string& data_dir,
                                                 const std::vector<std::string>& ids, int size) {
    std::vector<SamplePair> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(preprocess(load_sample(data_dir, id), size));
    return out;
}

// One full run: AdamW on the trainable partition, warmup + linear-decay lr,
// per-epoch loss log, checkpoint at end and at best validation Dice.
inline TrainResult train_model(BussamModel<float>& model, const TrainConfig& cfg,
                               const std::string& data_dir, const std::string& ckpt_out,
                               bool verbose = false) {
    cfg.validate();
    const int S = cfg.model.input_size;
    const auto split = read_split_manifest(
        (std::filesystem::path(data_dir) / "split.manifest").string());
    if (split.train_ids.empty()) throw DataError("empty train split in '" + data_dir + "'");
    std::vector<SamplePair> train_set = load_preprocessed(data_dir, split.train_ids, S);
    std::vector<SamplePair> test_set = load_preprocessed(data_dir, split.test_ids, S);

    const int n = static_cast<int>(train_set.size());
    const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    LrSchedule sched;
    sched.total_steps = steps_per_epoch * cfg.epochs;
    sched.warmup_steps = cfg.warmup_steps >= 0 ? cfg.warmup_steps
                                               : std::max(1, sched.total_steps / 20);
    sched.peak = cfg.lr;

    AdamW<float> opt(model.store, cfg.weight_decay);
    TrainResult result;
    result.log_csv = "epoch,mean_loss,val_dice\n";
    double best_dice = -1.0;
    int step = 0;

    FiniteCheckGuard finite_check;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[i] = i;
        std::mt19937_64 shuffle_rng(cfg.seed * 0x2545f4914f6cdd1dull + epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        for (int b = 0; b < steps_per_epoch; ++b) {
            std::vector<SamplePair> batch;
            for (int i = b * cfg.batch; i < std::min(n, (b + 1) * cfg.batch); ++i) {
                const int idx = order[i];
                batch.push_back(augment(train_set[idx],
                                        (cfg.seed ^ fnv1a(train_set[idx].id)) +
                                            0x9e3779b97f4a7c15ull * (epoch + 1)));
            }
            Tensor<float> images = batch_images<float>(batch);
            Tensor<float> masks = batch_masks<float>(batch);
            Tensor<float> loss;
            try {
                Tensor<float> prob = model_forward(model, images);
                loss = total_loss(prob, masks, cfg.model.loss_beta);
                opt.zero_grad();
                backward(loss);
            } catch (const NumericError& e) {
                throw NumericError("training aborted at epoch " + std::to_string(epoch + 1) +
                                   " step " + std::to_string(step + 1) + ": " + e.what());
            }
            opt.step(sched.at(step));
            ++step;
            loss_sum += static_cast<double>(loss.item());
        }
        const double mean_loss = loss_sum / steps_per_epoch;
        result.epoch_loss.push_back(mean_loss);

        double dice = 0.0;
        if (!test_set.empty()) {
            dice = evaluate_samples(model, test_set).mean.dice;
            if (dice > best_dice) {
                best_dice = dice;
                result.best_epoch = epoch;
                if (!ckpt_out.empty()) save_checkpoint(ckpt_out + ".best", cfg.model, model.store);
            }
        }
        result.val_dice.push_back(dice);
        char row[128];
        std::snprintf(row, sizeof(row), "%d,%.6f,%.4f\n", epoch + 1, mean_loss, dice);
        result.log_csv += row;
        if (verbose)
            std::cerr << "epoch " << (epoch + 1) << "/" << cfg.epochs << " loss " << mean_loss
                      << " val dice " << dice << "\n";
    }
    if (!ckpt_out.empty()) save_checkpoint(ckpt_out, cfg.model, model.store);
    return result;
}

// --- gradient checking -------------------------------------------------------

struct GradcheckGroup {
    std::string group;
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped_kinks = 0;  // coordinates straddling a max-pool tie switch
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    double tolerance = 1e-4;
    bool passed = true;
};

inline std::string param_group(const std::string& name) {
    const auto dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

// Central finite differences at 64-bit against the analytic gradients of
// total_loss on one synthetic batch. Up to `coords_per_param` randomly chosen
// coordinates per trainable parameter; results aggregated per module group.
inline GradcheckReport gradcheck(const ModelConfig& cfg, double tolerance, std::uint64_t seed,
                                 int coords_per_param = 8) {
    cfg.validate();
    if (cfg.input_size > 64 || cfg.embed_dim > 32)
        throw ConfigError("gradcheck: tiny config required (input_size <= 64, embed_dim <= 32)");

    BussamModel<double> model = build_model<double>(cfg, seed);
    // Zero-initialized projections would make their upstream gradients vanish
    // identically; jitter every trainable parameter so the check is generic.
    for (auto& [name, entry] : model.store)
        if (entry.trainable) {
            auto rng = rng_for(seed ^ 0xabcdef12345ull, name);
            std::normal_distribution<double> dist(0.0, 0.01);
            for (auto& v : entry.tensor.data()) v += dist(rng);
        }

    std::vector<SamplePair> batch;
    for (int i = 0; i < 2; ++i)
        batch.push_back(preprocess(
            synth_sample(cfg.input_size, seed * 77 + i, "gc_" + std::to_string(i)),
            cfg.input_size));
    Tensor<double> images = batch_images<double>(batch);
    Tensor<double> masks = batch_masks<double>(batch);

    auto eval_loss = [&]() -> double {
        NoGradGuard ng;
        return total_loss(model_forward(model, images), masks, cfg.loss_beta).item();
    };

    for (auto& [name, entry] : model.store) entry.tensor.zero_grad();
    Tensor<double> loss = total_loss(model_forward(model, images), masks, cfg.loss_beta);
    backward(loss);

    std::map<std::string, GradcheckGroup> groups;
    const double h = 1e-4;
    for (auto& [name, entry] : model.store) {
        if (!entry.trainable) continue;
        auto& g = groups[param_group(name)];
        g.group = param_group(name);
        auto& val = entry.tensor.data();
        const bool has_grad = entry.tensor.has_grad();
        auto rng = rng_for(seed ^ 0x51ca9bu, name);
        const int ncoords = std::min<int>(coords_per_param, static_cast<int>(val.size()));
        std::vector<std::size_t> coords;
        if (ncoords == static_cast<int>(val.size())) {
            for (std::size_t i = 0; i < val.size(); ++i) coords.push_back(i);
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, val.size() - 1);
            while (static_cast<int>(coords.size()) < ncoords) {
                std::size_t c = pick(rng);
                if (std::find(coords.begin(), coords.end(), c) == coords.end())
                    coords.push_back(c);
            }
        }
        auto central = [&](std::size_t c, double step) {
            const double orig = val[c];
            val[c] = orig + step;
            const double lp = eval_loss();
            val[c] = orig - step;
            const double lm = eval_loss();
            val[c] = orig;
            return (lp - lm) / (2.0 * step);
        };
        auto rel = [](double a, double b) {
            return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
        };
        for (std::size_t c : coords) {
            const double fd = central(c, h);
            const double an = has_grad ? static_cast<double>(entry.tensor.grad()[c]) : 0.0;
            double err = rel(an, fd);
            if (err > tolerance) {
                // Max pooling makes the loss piecewise smooth; an interval that
                // straddles an argmax switch yields an invalid FD estimate.
                // Shrink the step twice: if the estimate has not settled
                // between h/8 and h/64 the coordinate sits on a kink and is
                // excluded; if it has settled, the settled value is the honest
                // comparison point (a genuine backward bug disagrees with the
                // settled estimate at every step size).
                const double fd8 = central(c, h / 8.0);
                const double fd64 = central(c, h / 64.0);
                if (rel(fd8, fd64) > std::max(tolerance, 1e-6)) {
                    ++g.skipped_kinks;
                    continue;
                }
                err = rel(an, fd64);
            }
            g.max_rel_err = std::max(g.max_rel_err, err);
            ++g.checked;
        }
    }

    GradcheckReport report;
    report.tolerance = tolerance;
    for (auto& [k, v] : groups) {
        // a group whose every sampled coordinate was excluded proves nothing
        if (v.max_rel_err > tolerance || v.checked == 0) report.passed = false;
        report.groups.push_back(v);
    }
    return report;
}

}  // namespace bussam
