// bussam command-line interface: synthetic data generation, dataset split,
// training, evaluation, and gradient checking.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "bussam/train.hpp"

namespace fs = std::filesystem;
using namespace bussam;

namespace {

int cmd_synth(const std::string& out_dir, int count, int size, std::uint64_t seed) {
    fs::create_directories(out_dir);
    auto ids = synth_dataset(count, size, seed, out_dir);
    std::cout << "wrote " << ids.size() << " sample pairs to " << out_dir << "\n";
    return 0;
}

int cmd_split(const std::string& dir, std::uint64_t seed) {
    auto ids = list_dataset_ids(dir);
    if (ids.empty()) throw DataError("no '*_img.pgm' samples found in '" + dir + "'");
    std::vector<LabeledId> labeled;
    for (const auto& id : ids) labeled.push_back({id, "synthetic"});
    DatasetSplit split = split_dataset(labeled, seed);
    const std::string path = (fs::path(dir) / "split.manifest").string();
    write_split_manifest(split, path);
    std::cout << "split " << split.train_ids.size() << " train / " << split.test_ids.size()
              << " test -> " << path << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& ckpt_out, const std::string& log_csv) {
    TrainConfig cfg = parse_config_file(config_path);
    BussamModel<float> model = build_model<float>(cfg.model, cfg.seed);
    TrainResult result = train_model(model, cfg, data_dir, ckpt_out, /*verbose=*/true);
    if (!log_csv.empty()) {
        std::ofstream out(log_csv);
        if (!out) throw DataError("cannot write log CSV '" + log_csv + "'");
        out << result.log_csv;
    }
    std::cout << "final epoch loss " << result.epoch_loss.back() << ", best val dice "
              << (result.best_epoch >= 0 ? result.val_dice[result.best_epoch] : 0.0)
              << " (epoch " << (result.best_epoch + 1) << ")\n"
              << "checkpoint written to " << ckpt_out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& csv_out,
             const std::string& save_masks) {
    BussamModel<float> model = load_checkpoint(ckpt_path);
    const std::string manifest = (fs::path(data_dir) / "split.manifest").string();
    std::vector<std::string> ids;
    if (fs::exists(manifest)) {
        ids = read_split_manifest(manifest).test_ids;
    } else {
        ids = list_dataset_ids(data_dir);
    }
    if (ids.empty()) throw DataError("no evaluation samples found in '" + data_dir + "'");
    if (!save_masks.empty()) fs::create_directories(save_masks);
    auto samples = load_preprocessed(data_dir, ids, model.cfg.input_size);
    MetricsReport report = evaluate_samples(model, samples, save_masks);
    std::ofstream out(csv_out);
    if (!out) throw DataError("cannot write metrics CSV '" + csv_out + "'");
    out << metrics_csv(report);
    std::cout << "evaluated " << ids.size() << " samples, mean dice " << report.mean.dice
              << " -> " << csv_out << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& config_path, double tol, std::uint64_t seed) {
    TrainConfig cfg = parse_config_file(config_path);
    GradcheckReport report = gradcheck(cfg.model, tol, seed);
    for (const auto& g : report.groups)
        std::cout << g.group << ": max rel err " << g.max_rel_err << " over " << g.checked
                  << " coordinates" << (g.max_rel_err <= tol ? "" : "  [EXCEEDS TOLERANCE]")
                  << "\n";
    if (!report.passed) {
        std::cout << "gradcheck FAILED (tolerance " << tol << ")\n";
        return 3;
    }
    std::cout << "gradcheck passed (tolerance " << tol << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bussam: breast-ultrasound lesion segmentation trainer"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic lesion dataset");
    std::string synth_out;
    int synth_count = 200, synth_size = 64;
    std::uint64_t synth_seed = 42;
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--count", synth_count, "Number of samples")->required();
    synth->add_option("--size", synth_size, "Image side length")->required();
    synth->add_option("--seed", synth_seed, "RNG seed")->required();

    auto* split = app.add_subcommand("split", "Write split.manifest for a dataset directory");
    std::string split_dir;
    std::uint64_t split_seed = 42;
    split->add_option("--dir", split_dir, "Dataset directory")->required();
    split->add_option("--seed", split_seed, "RNG seed")->required();

    auto* train = app.add_subcommand("train", "Train a model");
    std::string train_config, train_data, train_out, train_log;
    train->add_option("--config", train_config, "Config file")->required();
    train->add_option("--data", train_data, "Dataset directory with split.manifest")->required();
    train->add_option("--out", train_out, "Output checkpoint path")->required();
    train->add_option("--log", train_log, "Per-epoch loss CSV path");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_csv, eval_masks;
    eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
    eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
    eval_cmd->add_option("--csv", eval_csv, "Metrics CSV output path")->required();
    eval_cmd->add_option("--save-masks", eval_masks, "Directory for predicted mask PGMs");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check (tiny config)");
    std::string gc_config;
    double gc_tol = 1e-4;
    std::uint64_t gc_seed = 42;
    gc->add_option("--config", gc_config, "Config file")->required();
    gc->add_option("--tol", gc_tol, "Relative-error tolerance")->required();
    gc->add_option("--seed", gc_seed, "RNG seed")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_out, synth_count, synth_size, synth_seed);
        if (split->parsed()) return cmd_split(split_dir, split_seed);
        if (train->parsed()) return cmd_train(train_config, train_data, train_out, train_log);
        if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_csv, eval_masks);
        if (gc->parsed()) return cmd_gradcheck(gc_config, gc_tol, gc_seed);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
