#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "funet/config.hpp"
#include "funet/data.hpp"
#include "funet/errors.hpp"
#include "funet/loss.hpp"
#include "funet/metrics.hpp"
#include "funet/network.hpp"
#include "funet/training.hpp"

// Command-line front end: gen-data, train, eval, compare, weight-curve.
//
// Exit codes: 0 success, 1 usage or config error, 2 data or format error,
// 3 numerical failure.

namespace funet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

namespace fs = std::filesystem;

struct Common {
    std::string config_path;
    std::string out_dir = ".";
    std::string seed;
    std::vector<std::string> assignments;
    std::map<std::string, std::string> flag_values;  // config key -> value from a dedicated flag
};

inline RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::from_file(c.config_path);
    for (const auto& a : c.assignments) cfg.set_assignment(a);
    for (const auto& [key, value] : c.flag_values) {
        if (!value.empty()) cfg.set(key, value);
    }
    if (!c.seed.empty()) cfg.set("seed", c.seed);
    return cfg;
}

inline fs::path prepare_out_dir(const std::string& dir) {
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

inline int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    cfg.require("seed");
    const SynthConfig synth = cfg.synth_config();
    const Dataset data = generate(synth);
    const auto dir = prepare_out_dir(out_dir);
    const auto manifest = save_dataset(data, dir.string());
    cfg.write_resolved((dir / "resolved.cfg").string());
    out << "samples=" << data.size() << " small_fraction=" << small_class_fraction(data) << " manifest=" << manifest
        << '\n';
    return kOk;
}

inline int cmd_train(const RunConfig& cfg, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    cfg.require("seed");
    const std::string manifest = cfg.require("manifest");
    const NetworkSpec spec = cfg.network_spec();
    const Hyperparams hp = cfg.hyperparams();
    const Dataset data = load_dataset(manifest, spec.num_classes);
    const Split parts = split(data, cfg.get_size("n_train"), cfg.get_size("n_val"), hp.seed);
    hp.validate(parts.train.size());

    const auto dir = prepare_out_dir(out_dir);
    cfg.write_resolved((dir / "resolved.cfg").string());

    Network net = Network::build(spec, hp.seed);
    TrainResult result = train(std::move(net), parts.train, parts.val, hp, [&](const EpochLog& e, const TrainLog& log) {
        err << "epoch " << e.epoch << " loss=" << log.iterations.back().loss;
        if (!log.epochs.empty()) err << " val_dice=" << e.mean_val_dice;
        err << '\n';
    });

    result.network.save((dir / "model.funet").string());
    write_train_log_csv((dir / "train_log.csv").string(), result.log);
    write_validation_csv((dir / "validation.csv").string(), result.log);

    // Test split, with paths rewritten relative to the output directory.
    std::map<std::string, ManifestRow> by_id;
    for (auto& r : read_manifest(manifest)) by_id[r.id] = r;
    const auto base = fs::absolute(fs::path(manifest)).parent_path();
    const auto out_abs = fs::absolute(dir);
    std::vector<ManifestRow> test_rows;
    for (const auto& s : parts.test) {
        const auto& r = by_id.at(s.id);
        test_rows.push_back({s.id, fs::relative(base / r.image_path, out_abs).generic_string(),
                             fs::relative(base / r.mask_path, out_abs).generic_string()});
    }
    write_manifest((dir / "test_manifest.csv").string(), test_rows);

    out << "model=" << (dir / "model.funet").string() << " best_epoch=" << result.log.best_epoch
        << " best_val_dice=" << result.log.best_val_dice << " test_images=" << parts.test.size() << '\n';
    return kOk;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    const Network net = Network::load(cfg.require("model"));
    const Dataset data = load_dataset(cfg.require("manifest"), net.spec().num_classes);
    const RunReport report = evaluate(net, data, cfg.get_size("eval_background") != 0);
    const auto dir = prepare_out_dir(out_dir);
    write_metrics_csv((dir / "metrics.csv").string(), report.records);
    cfg.write_resolved((dir / "resolved.cfg").string());
    out << std::fixed << std::setprecision(6);
    for (const auto& s : report.summary) {
        out << "class=" << s.class_id << " dice_mean=" << s.mean << " dice_std=" << s.std << '\n';
    }
    return kOk;
}

inline int cmd_compare(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    const auto a = read_metrics_csv(cfg.require("metrics_a"));
    const auto b = read_metrics_csv(cfg.require("metrics_b"));
    const auto rows = compare_runs(a, b, cfg.require("name_a"), cfg.require("name_b"));
    const auto dir = prepare_out_dir(out_dir);
    write_comparison_csv((dir / "comparison.csv").string(), rows);
    cfg.write_resolved((dir / "resolved.cfg").string());
    for (const auto& r : rows) {
        out << "class=" << r.class_id << " t=" << r.test.t << " df=" << r.test.df << " p=" << r.test.p
            << " degenerate=" << (r.test.degenerate ? 1 : 0) << '\n';
    }
    return kOk;
}

/// CSV "beta,p,w" with `points` evenly spaced p in [0, 1] per beta.
inline std::string weight_curve_csv(const std::vector<double>& betas, std::size_t points) {
    if (betas.empty()) throw ConfigError("config key 'betas' must list at least one value");
    if (points < 2) throw ConfigError("config key 'points' must be at least 2");
    std::ostringstream os;
    os << "beta,p,w\n";
    for (const double beta : betas) {
        LossConfig{WeightMode::feedback, beta}.validate();
        for (std::size_t i = 0; i < points; ++i) {
            const double p = i + 1 == points ? 1.0 : static_cast<double>(i) / static_cast<double>(points - 1);
            os << format_double(beta) << ',' << format_double(p) << ',' << format_double(feedback_weight(p, beta))
               << '\n';
        }
    }
    return os.str();
}

inline int cmd_weight_curve(const RunConfig& cfg, const std::string& out_dir, bool to_stdout, std::ostream& out) {
    const std::string csv = weight_curve_csv(cfg.get_double_list("betas"), cfg.get_size("points"));
    if (to_stdout) {
        out << csv;
        return kOk;
    }
    const auto dir = prepare_out_dir(out_dir);
    std::ofstream file(dir / "weight_curve.csv", std::ios::binary);
    if (!file) throw FormatError("cannot write " + (dir / "weight_curve.csv").string());
    file << csv;
    cfg.write_resolved((dir / "resolved.cfg").string());
    out << "wrote " << (dir / "weight_curve.csv").string() << '\n';
    return kOk;
}

inline void add_common(CLI::App* cmd, Common& c, bool with_seed) {
    cmd->add_option("--config", c.config_path, "flat key=value configuration file");
    cmd->add_option("--out", c.out_dir, "output directory");
    if (with_seed) cmd->add_option("--seed", c.seed, "RNG seed (overrides the config)");
    cmd->add_option("--set", c.assignments, "override any config key: --set key=value");
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Feedback-weighted U-net segmentation toolkit"};
    app.require_subcommand(1);
    Common common;
    auto flag = [&](CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
        cmd->add_option(name, common.flag_values[key], help);
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset and manifest");
    add_common(gen, common, true);

    auto* trn = app.add_subcommand("train", "train a network on a manifest");
    add_common(trn, common, true);
    flag(trn, "--manifest", "manifest", "dataset manifest CSV");
    flag(trn, "--variant", "variant", "plain | bru");
    flag(trn, "--loss", "loss", "uniform | feedback");
    flag(trn, "--beta", "beta", "feedback exponent");
    flag(trn, "--epochs", "epochs", "training epochs");

    auto* evl = app.add_subcommand("eval", "evaluate a model on a manifest");
    add_common(evl, common, false);
    flag(evl, "--model", "model", "model file");
    flag(evl, "--manifest", "manifest", "dataset manifest CSV");

    auto* cmp = app.add_subcommand("compare", "paired t-test between two metrics files");
    add_common(cmp, common, false);
    flag(cmp, "--a", "metrics_a", "first metrics CSV");
    flag(cmp, "--b", "metrics_b", "second metrics CSV");
    flag(cmp, "--name-a", "name_a", "label of the first run");
    flag(cmp, "--name-b", "name_b", "label of the second run");

    auto* curve = app.add_subcommand("weight-curve", "tabulate the feedback weight against p");
    add_common(curve, common, false);
    flag(curve, "--betas", "betas", "comma-separated beta values");
    flag(curve, "--points", "points", "samples per curve");

    std::vector<std::string> storage = args;
    storage.insert(storage.begin(), "funet");
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    }

    try {
        const RunConfig cfg = resolve_config(common);
        if (gen->parsed()) return cmd_gen_data(cfg, common.out_dir, out);
        if (trn->parsed()) return cmd_train(cfg, common.out_dir, out, err);
        if (evl->parsed()) return cmd_eval(cfg, common.out_dir, out);
        if (cmp->parsed()) return cmd_compare(cfg, common.out_dir, out);
        return cmd_weight_curve(cfg, common.out_dir, curve->count("--out") == 0, out);
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return kNumerical;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kData;
    }
}

}  // namespace funet::cli
