#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "funet/data.hpp"
#include "funet/errors.hpp"
#include "funet/loss.hpp"
#include "funet/metrics.hpp"
#include "funet/network.hpp"

namespace funet {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct Hyperparams {
    std::size_t batch_size = 5;
    double learning_rate = 0.001;
    std::size_t epochs = 400;
    std::size_t iterations_per_epoch = 0;  // 0: ceil(n_train / batch_size)
    LossConfig loss;
    std::uint64_t seed = 0;
    AdamConfig adam;

    std::size_t iterations_for(std::size_t n_train) const {
        return iterations_per_epoch ? iterations_per_epoch : (n_train + batch_size - 1) / batch_size;
    }

    void validate(std::size_t n_train) const {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (!(learning_rate > 0.0 && std::isfinite(learning_rate))) throw ConfigError("learning_rate must be positive");
        if (batch_size > n_train) {
            throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the " +
                              std::to_string(n_train) + " training samples");
        }
        loss.validate();
    }
};

/// Bias-corrected Adam with one first/second moment buffer per parameter.
class AdamOptimizer {
public:
    explicit AdamOptimizer(const Network& net, AdamConfig config = {}) : config_(config) {
        for (const auto& p : net.parameters()) {
            first_.emplace_back(p.tensor.size(), 0.0);
            second_.emplace_back(p.tensor.size(), 0.0);
        }
    }

    void step(std::vector<Parameter>& params, double lr) {
        if (params.size() != first_.size()) throw UsageError("adam: parameter list does not match optimizer state");
        for (const auto& p : params) {
            if (p.tensor.grad().size() != p.tensor.size()) throw UsageError("adam: missing gradient for " + p.name);
        }
        ++steps_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto theta = params[k].tensor.mutable_values();
            const auto g = params[k].tensor.grad();
            auto& m = first_[k];
            auto& v = second_[k];
            if (m.size() != theta.size()) throw UsageError("adam: moment shape mismatch for " + params[k].name);
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
                theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
            }
        }
    }

    std::size_t steps() const noexcept { return steps_; }
    const std::vector<std::vector<double>>& first_moments() const noexcept { return first_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return second_; }

private:
    AdamConfig config_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t steps_ = 0;
};

struct IterationLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double mean_weight = 0.0;
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_val_dice = 0.0;
};

struct TrainLog {
    std::vector<IterationLog> iterations;
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0;
    double best_val_dice = -1.0;
};

struct TrainResult {
    Network network;  // best-validation snapshot (final network without a validation set)
    TrainLog log;
};

/// Mean dice over (image, foreground class) pairs in eval mode.
inline double mean_foreground_dice(const Network& net, const Dataset& data) {
    if (data.empty()) return 0.0;
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : data) {
        const Batch b = make_batch(s);
        const LabelMap pred = argmax_labels(net.predict(b.images));
        for (std::size_t c = 1; c < net.spec().num_classes; ++c) {
            total += dice(pred, b.labels, static_cast<int>(c)).value;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

namespace detail {

inline double parameter_norm(const Network& net) {
    double sq = 0.0;
    for (const auto& p : net.parameters()) {
        for (const double v : p.tensor.values()) sq += v * v;
    }
    return std::sqrt(sq);
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochLog&, const TrainLog&)>;

/// Mini-batch Adam training. Each iteration runs forward (train mode),
/// the weighted loss, backward and one Adam step. Batches are drawn without
/// replacement from a per-pass shuffle; after every epoch the network is
/// scored on `val` and the best-scoring snapshot is kept.
inline TrainResult train(Network net, const Dataset& train_set, const Dataset& val_set, const Hyperparams& hp,
                         const EpochCallback& on_epoch = {}) {
    hp.validate(train_set.size());
    std::mt19937_64 rng(hp.seed);
    net.reseed_dropout(rng());
    AdamOptimizer adam(net, hp.adam);
    const std::size_t iterations = hp.iterations_for(train_set.size());

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    TrainLog log;
    std::optional<Network> best;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
        for (std::size_t it = 0; it < iterations; ++it, ++step) {
            if (cursor + hp.batch_size > order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const Batch batch = make_batch(train_set, std::span(order).subspan(cursor, hp.batch_size));
            cursor += hp.batch_size;

            Tape tape;
            net.zero_grad();
            LossStep result;
            try {
                const Tensor probs = net.forward(batch.images, Mode::train, &tape);
                result = loss_step(probs, batch.labels, hp.loss, &tape);
            } catch (const NumericalError& e) {
                throw NumericalError("train: non-finite value at iteration " + std::to_string(step) + " (epoch " +
                                     std::to_string(epoch) + ", parameter norm " +
                                     std::to_string(detail::parameter_norm(net)) + "): " + e.what());
            }
            const double loss = result.loss.item();
            if (!std::isfinite(loss)) {
                throw NumericalError("train: non-finite loss at iteration " + std::to_string(step) +
                                     " (parameter norm " + std::to_string(detail::parameter_norm(net)) + ")");
            }
            tape.backward(result.loss);
            adam.step(net.parameters(), hp.learning_rate);
            log.iterations.push_back({step, epoch, loss, result.weights.mean()});
        }

        if (!val_set.empty()) {
            const double score = mean_foreground_dice(net, val_set);
            log.epochs.push_back({epoch, score});
            if (score > log.best_val_dice) {
                log.best_val_dice = score;
                log.best_epoch = epoch;
                best = net.clone();
            }
        }
        if (on_epoch) on_epoch(log.epochs.empty() ? EpochLog{epoch, 0.0} : log.epochs.back(), log);
    }
    if (!best) {
        log.best_epoch = hp.epochs - 1;
        return {std::move(net), std::move(log)};
    }
    return {std::move(*best), std::move(log)};
}

struct RunReport {
    std::vector<DiceRecord> records;
    std::vector<ClassSummary> summary;
};

/// Eval-mode prediction of every image (batch size 1), argmax, and per-class
/// dice. Background rows are included only on request.
inline RunReport evaluate(const Network& net, const Dataset& test_set, bool include_background = false) {
    if (test_set.empty()) throw UsageError("evaluate: empty test set");
    RunReport report;
    const int first = include_background ? 0 : 1;
    for (const auto& s : test_set) {
        const Batch b = make_batch(s);
        const LabelMap pred = argmax_labels(net.predict(b.images));
        for (int c = first; c < static_cast<int>(net.spec().num_classes); ++c) {
            const DiceScore d = dice(pred, b.labels, c);
            report.records.push_back({s.id, c, d.value, d.degenerate});
        }
    }
    report.summary = summarize(report.records);
    return report;
}

// ---- Log files ---------------------------------------------------------------------

inline void write_train_log_csv(const std::string& path, const TrainLog& log) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    out << "step,epoch,loss,mean_weight\n";
    for (const auto& r : log.iterations) {
        out << r.step << ',' << r.epoch << ',' << format_double(r.loss) << ',' << format_double(r.mean_weight) << '\n';
    }
}

inline void write_validation_csv(const std::string& path, const TrainLog& log) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    out << "epoch,mean_val_dice\n";
    for (const auto& r : log.epochs) out << r.epoch << ',' << format_double(r.mean_val_dice) << '\n';
}

}  // namespace funet
