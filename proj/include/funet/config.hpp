#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "funet/data.hpp"
#include "funet/errors.hpp"
#include "funet/loss.hpp"
#include "funet/network.hpp"
#include "funet/training.hpp"

namespace funet {

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* doc;
};

// Every accepted key, in the order the resolved config is written.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"seed", "", "RNG seed; required by gen-data and train"},
        {"variant", "bru", "network layer type: plain | bru"},
        {"depth", "4", "number of 2x down-samplings"},
        {"base_channels", "16", "feature channels at full resolution, doubled per level"},
        {"num_classes", "3", "number of segmentation classes"},
        {"dropout_rate", "0.25", "dropout after each contracting layer and the bottleneck"},
        {"input_channels", "1", "image channels"},
        {"loss", "feedback", "pixel weighting: uniform | feedback"},
        {"beta", "3", "exponent of the feedback weight"},
        {"batch_size", "5", "images per iteration"},
        {"learning_rate", "0.001", "Adam step size"},
        {"epochs", "400", "training epochs"},
        {"iterations_per_epoch", "0", "iterations per epoch; 0 means ceil(n_train / batch_size)"},
        {"n_train", "100", "training images drawn from the manifest"},
        {"n_val", "10", "validation images drawn from the manifest"},
        {"manifest", "", "dataset manifest CSV (train, eval)"},
        {"model", "", "model file (eval)"},
        {"eval_background", "0", "1 to include background rows in the metrics CSV"},
        {"metrics_a", "", "first metrics CSV (compare)"},
        {"metrics_b", "", "second metrics CSV (compare)"},
        {"name_a", "a", "label of the first run (compare)"},
        {"name_b", "b", "label of the second run (compare)"},
        {"betas", "1,2,3,4", "comma-separated beta values (weight-curve)"},
        {"points", "101", "samples of p in [0, 1] per curve (weight-curve)"},
        {"height", "64", "synthetic image height"},
        {"width", "64", "synthetic image width"},
        {"count", "310", "number of synthetic samples"},
        {"small_fraction", "0.02", "target fraction of small-structure pixels"},
        {"large_fraction", "0.15", "target fraction of large-structure pixels"},
        {"noise_std", "0.08", "Gaussian noise standard deviation"},
        {"background_intensity", "0.2", "mean background intensity"},
        {"large_intensity", "0.5", "mean large-structure intensity"},
        {"small_intensity", "0.65", "mean small-structure intensity"},
    };
    return keys;
}

/// Flat key=value configuration. Lines starting with '#' are comments.
class RunConfig {
public:
    RunConfig() {
        for (const auto& k : config_keys()) values_[k.name] = k.default_value;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        RunConfig cfg;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            const auto first = line.find_first_not_of(" \t");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
            }
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    /// Accepts "key=value".
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    const std::string& get(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    bool is_set(const std::string& key) const { return !get(key).empty(); }

    std::string require(const std::string& key) const {
        if (!is_set(key)) throw ConfigError("config key '" + key + "' must be set");
        return get(key);
    }

    std::uint64_t get_u64(const std::string& key) const {
        const auto& text = require(key);
        try {
            std::size_t used = 0;
            if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
            const auto v = std::stoull(text, &used);
            if (used != text.size()) throw std::invalid_argument(text);
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + text + "'");
        }
    }

    std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

    double get_double(const std::string& key) const {
        const auto& text = require(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(text, &used);
            if (used != text.size()) throw std::invalid_argument(text);
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
        }
    }

    std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        std::istringstream in(require(key));
        std::string item;
        while (std::getline(in, item, ',')) {
            RunConfig tmp;
            tmp.values_[key] = trim(item);
            out.push_back(tmp.get_double(key));
        }
        return out;
    }

    /// Fully resolved configuration, one key per line, in canonical key order.
    std::string resolved_text() const {
        std::ostringstream os;
        for (const auto& k : config_keys()) os << k.name << '=' << values_.at(k.name) << '\n';
        return os.str();
    }

    void write_resolved(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot write " + path);
        out << resolved_text();
    }

    NetworkSpec network_spec() const {
        NetworkSpec spec;
        spec.variant = parse_variant(get("variant"));
        spec.depth = get_size("depth");
        spec.base_channels = get_size("base_channels");
        spec.num_classes = get_size("num_classes");
        spec.dropout_rate = get_double("dropout_rate");
        spec.input_channels = get_size("input_channels");
        spec.validate();
        return spec;
    }

    LossConfig loss_config() const {
        LossConfig cfg;
        cfg.mode = parse_weight_mode(get("loss"));
        cfg.beta = get_double("beta");
        cfg.validate();
        return cfg;
    }

    Hyperparams hyperparams() const {
        Hyperparams hp;
        hp.batch_size = get_size("batch_size");
        hp.learning_rate = get_double("learning_rate");
        hp.epochs = get_size("epochs");
        hp.iterations_per_epoch = get_size("iterations_per_epoch");
        hp.loss = loss_config();
        hp.seed = get_u64("seed");
        return hp;
    }

    SynthConfig synth_config() const {
        SynthConfig cfg;
        cfg.height = get_size("height");
        cfg.width = get_size("width");
        cfg.count = get_size("count");
        cfg.small_fraction = get_double("small_fraction");
        cfg.large_fraction = get_double("large_fraction");
        cfg.noise_std = get_double("noise_std");
        cfg.background_intensity = get_double("background_intensity");
        cfg.large_intensity = get_double("large_intensity");
        cfg.small_intensity = get_double("small_intensity");
        cfg.seed = get_u64("seed");
        cfg.validate();
        return cfg;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace funet
