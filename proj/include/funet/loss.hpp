#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "funet/errors.hpp"
#include "funet/label_map.hpp"
#include "funet/ops.hpp"
#include "funet/tensor.hpp"

namespace funet {

enum class WeightMode { uniform, feedback };

inline std::string to_string(WeightMode mode) {
    return mode == WeightMode::uniform ? "uniform" : "feedback";
}

inline WeightMode parse_weight_mode(const std::string& text) {
    if (text == "uniform") return WeightMode::uniform;
    if (text == "feedback") return WeightMode::feedback;
    throw ConfigError("loss: unknown weight mode '" + text + "' (expected uniform|feedback)");
}

/// Natural log of 100: pins the weight of a perfectly predicted pixel at 0.01.
inline const double kLogHundred = std::log(100.0);

/// Probabilities are floored here before taking the log.
inline constexpr double kProbabilityFloor = 1e-12;

struct LossConfig {
    WeightMode mode = WeightMode::feedback;
    double beta = 3.0;

    void validate() const {
        if (!(std::isfinite(beta) && beta > 0.0)) {
            throw ConfigError("loss: beta must be finite and positive, got " + std::to_string(beta));
        }
    }
};

/// w = exp(-ln(100) * p^beta). Decreasing in p, from 1 at p=0 to 0.01 at p=1.
inline double feedback_weight(double p_true, double beta) {
    if (!(p_true >= 0.0 && p_true <= 1.0)) {
        throw DomainError("feedback_weight: probability " + std::to_string(p_true) + " outside [0, 1]");
    }
    return std::exp(-kLogHundred * std::pow(p_true, beta));
}

/// Weight map for a tensor of true-class probabilities shaped N x H x W.
/// Only the values are read, so the map is detached from any tape.
inline WeightMap feedback_weight(const Tensor& p_true, double beta) {
    WeightMap map{p_true.shape(), std::vector<double>(p_true.size())};
    const auto p = p_true.values();
    for (std::size_t i = 0; i < p.size(); ++i) map.weights[i] = feedback_weight(p[i], beta);
    return map;
}

/// Gathers p_{l(x)}(x) from an N x C x H x W probability map. Result is N x H x W.
inline Tensor true_class_prob(const Tensor& probs, const LabelMap& labels, Tape* tape = nullptr) {
    const std::string op = "true_class_prob";
    detail::require_rank(op, probs, 4, "probabilities");
    const auto n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    if (labels.shape != Shape{n, h, w}) {
        throw ShapeError(op, "label map", shape_string(labels.shape) + " vs probabilities " + shape_string(probs.shape()));
    }
    const auto hw = h * w;
    std::vector<std::size_t> index(n * hw);
    std::vector<double> out(n * hw);
    const auto p = probs.values();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            const int label = labels.labels[b * hw + i];
            if (label < 0 || static_cast<std::size_t>(label) >= c) {
                throw IndexError(op + ": label " + std::to_string(label) + " out of range [0, " +
                                 std::to_string(c) + ") at pixel (n=" + std::to_string(b) +
                                 ", y=" + std::to_string(i / w) + ", x=" + std::to_string(i % w) + ")");
            }
            index[b * hw + i] = (b * c + static_cast<std::size_t>(label)) * hw + i;
            out[b * hw + i] = p[index[b * hw + i]];
        }
    }
    return emit(tape, op, {probs}, {n, h, w}, std::move(out),
                [index = std::move(index)](const TapeRecord& rec) {
                    const auto g = rec.output_grad();
                    const auto gi = rec.input_grad(0);
                    for (std::size_t k = 0; k < g.size(); ++k) gi[index[k]] += g[k];
                });
}

/// E = -(1/M) sum w(x) ln(max(p(x), 1e-12)) over all M = N*H*W pixels.
inline Tensor weighted_nll(const Tensor& p_true, const WeightMap& weights, Tape* tape = nullptr) {
    const std::string op = "weighted_nll";
    if (weights.shape != p_true.shape()) {
        throw ShapeError(op, "weight map", shape_string(weights.shape) + " vs " + shape_string(p_true.shape()));
    }
    const auto p = p_true.values();
    const double scale = 1.0 / static_cast<double>(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        total -= weights.weights[i] * std::log(std::max(p[i], kProbabilityFloor));
    }
    return emit(tape, op, {p_true}, {1}, {total * scale},
                [p_true, w = weights.weights, scale](const TapeRecord& rec) {
                    const double g = rec.output_grad()[0];
                    const auto gi = rec.input_grad(0);
                    const auto p = p_true.values();
                    for (std::size_t i = 0; i < gi.size(); ++i) {
                        if (p[i] > kProbabilityFloor) gi[i] -= g * scale * w[i] / p[i];
                    }
                });
}

inline Tensor weighted_cross_entropy(const Tensor& probs, const LabelMap& labels,
                                     const WeightMap& weights, Tape* tape = nullptr) {
    return weighted_nll(true_class_prob(probs, labels, tape), weights, tape);
}

struct LossStep {
    Tensor loss;
    WeightMap weights;
};

/// One loss evaluation. Feedback weights are rebuilt from the current
/// probabilities on every call.
inline LossStep loss_step(const Tensor& probs, const LabelMap& labels, const LossConfig& config,
                          Tape* tape = nullptr) {
    config.validate();
    const Tensor p_true = true_class_prob(probs, labels, tape);
    WeightMap weights = config.mode == WeightMode::uniform
                            ? WeightMap::uniform(p_true.shape())
                            : feedback_weight(p_true, config.beta);
    Tensor loss = weighted_nll(p_true, weights, tape);
    return {std::move(loss), std::move(weights)};
}

}  // namespace funet
