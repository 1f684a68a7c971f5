#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "funet/errors.hpp"
#include "funet/tensor.hpp"

namespace funet {

/// Integer class index per pixel, laid out N x H x W.
struct LabelMap {
    Shape shape;
    std::vector<int> labels;

    static LabelMap from(Shape shape, std::vector<int> labels) {
        if (shape.size() != 3) throw ShapeError("LabelMap", "rank", 3, shape.size());
        if (shape_size(shape) != labels.size()) {
            throw ShapeError("LabelMap", "element count", shape_size(shape), labels.size());
        }
        return {std::move(shape), std::move(labels)};
    }

    std::size_t batch() const { return shape.at(0); }
    std::size_t height() const { return shape.at(1); }
    std::size_t width() const { return shape.at(2); }
    std::size_t pixels_per_image() const { return height() * width(); }

    bool operator==(const LabelMap&) const = default;
};

/// Per-pixel loss weights, laid out N x H x W. A plain value store: the
/// weights never take part in differentiation.
struct WeightMap {
    Shape shape;
    std::vector<double> weights;

    static WeightMap uniform(Shape shape, double value = 1.0) {
        const auto n = shape_size(shape);
        return {std::move(shape), std::vector<double>(n, value)};
    }

    double mean() const {
        double total = 0.0;
        for (const double w : weights) total += w;
        return weights.empty() ? 0.0 : total / static_cast<double>(weights.size());
    }
};

}  // namespace funet
