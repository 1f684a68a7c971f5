#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "funet/errors.hpp"

namespace funet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

enum class Mode { train, eval };

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until the first backward touches it
    bool requires_grad = false;
    bool produced = false;  // output of a tape record, i.e. not a leaf
};

}  // namespace detail

/// Dense double-precision n-d array. Copies share storage; values are
/// immutable once a tensor has been produced by an operation.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_size(shape);
        return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = shape_size(shape);
        return make(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_size(shape) != values.size()) {
            throw ShapeError("Tensor", "element count", shape_size(shape), values.size());
        }
        for (const double v : values) {
            if (!std::isfinite(v)) throw NumericalError("Tensor: non-finite value in input data");
        }
        return make(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
    std::size_t size() const { return node().value.size(); }

    std::span<const double> values() const { return node().value; }

    /// Mutable view for leaves (parameter updates, initialization).
    std::span<double> mutable_values() {
        if (node().produced) throw UsageError("Tensor: cannot mutate the output of an operation");
        return node_->value;
    }

    double item() const {
        if (size() != 1) throw UsageError("Tensor::item on a tensor with " + std::to_string(size()) + " elements");
        return node().value[0];
    }

    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        const auto& s = shape();
        return node().value[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }

    bool requires_grad() const { return node().requires_grad; }
    bool is_leaf() const { return !node().produced; }

    bool has_grad() const { return !node().grad.empty(); }
    std::span<const double> grad() const { return node().grad; }
    std::span<double> mutable_grad() {
        ensure_grad();
        return node_->grad;
    }

    void ensure_grad() {
        if (node().grad.size() != size()) node_->grad.assign(size(), 0.0);
    }

    void zero_grad() {
        if (node().requires_grad) node_->grad.assign(size(), 0.0);
    }

    bool all_finite() const {
        return std::all_of(node().value.begin(), node().value.end(),
                           [](double v) { return std::isfinite(v); });
    }

    /// Deep copy of the values as a fresh leaf without gradient tracking.
    Tensor detach() const { return make(shape(), node().value, false); }

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

private:
    friend class Tape;

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    const detail::Node& node() const {
        if (!node_) throw UsageError("Tensor: use of an undefined tensor");
        return *node_;
    }

    std::shared_ptr<detail::Node> node_;
};

/// One recorded operation. `backward` reads the output gradient and
/// accumulates into the gradients of inputs that require them.
class TapeRecord {
public:
    std::string op;

    std::span<const double> output_grad() const { return output_->grad; }
    std::span<const double> output_value() const { return output_->value; }

    bool input_needs_grad(std::size_t i) const {
        return inputs_.at(i) && inputs_[i]->requires_grad;
    }

    /// Gradient buffer of input i, or an empty span when it needs none.
    std::span<double> input_grad(std::size_t i) const {
        if (!input_needs_grad(i)) return {};
        auto& node = *inputs_[i];
        if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), 0.0);
        return node.grad;
    }

private:
    friend class Tape;

    std::vector<std::shared_ptr<detail::Node>> inputs_;
    std::shared_ptr<detail::Node> output_;
    std::function<void(const TapeRecord&)> backward_;
};

/// Ordered log of differentiable operations. Records are appended in
/// execution order, so the log is already topologically sorted.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Wraps freshly computed values as the output of `op`. Nothing is
    /// recorded when no input requires a gradient.
    template <typename Backward>
    Tensor record(std::string op, std::initializer_list<Tensor> inputs, Shape shape,
                  std::vector<double> values, Backward&& backward) {
        for (const double v : values) {
            if (!std::isfinite(v)) throw NumericalError(op + ": produced a non-finite value");
        }
        auto out = std::make_shared<detail::Node>();
        out->shape = std::move(shape);
        out->value = std::move(values);
        out->produced = true;
        out->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
            return t.defined() && t.requires_grad();
        });
        if (out->requires_grad) {
            TapeRecord rec;
            rec.op = std::move(op);
            for (const auto& t : inputs) rec.inputs_.push_back(t.node_);
            rec.output_ = out;
            rec.backward_ = std::forward<Backward>(backward);
            records_.push_back(std::move(rec));
        }
        return Tensor(std::move(out));
    }

    /// Output of an operation evaluated without recording.
    static Tensor constant(const std::string& op, Shape shape, std::vector<double> values) {
        for (const double v : values) {
            if (!std::isfinite(v)) throw NumericalError(op + ": produced a non-finite value");
        }
        auto out = std::make_shared<detail::Node>();
        out->shape = std::move(shape);
        out->value = std::move(values);
        out->produced = true;
        return Tensor(std::move(out));
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across calls; intermediate gradients are rebuilt on every call.
    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw UsageError("backward: loss must be a scalar tensor");
        }
        const auto it = std::find_if(records_.begin(), records_.end(),
                                     [&](const TapeRecord& r) { return r.output_ == loss.node_; });
        if (it == records_.end()) throw UsageError("backward: loss was not produced on this tape");
        const auto last = static_cast<std::size_t>(it - records_.begin());

        for (auto& rec : records_) {
            rec.output_->grad.assign(rec.output_->value.size(), 0.0);
            for (auto& in : rec.inputs_) {
                if (in && !in->produced && in->requires_grad && in->grad.size() != in->value.size()) {
                    in->grad.assign(in->value.size(), 0.0);
                }
            }
        }
        loss.node_->grad[0] = 1.0;
        for (std::size_t i = last + 1; i-- > 0;) {
            records_[i].backward_(records_[i]);
        }
        for (auto& rec : records_) {
            if (rec.output_ != loss.node_) std::vector<double>().swap(rec.output_->grad);
        }
    }

    std::size_t size() const noexcept { return records_.size(); }
    const std::vector<TapeRecord>& records() const noexcept { return records_; }
    void clear() noexcept { records_.clear(); }

private:
    std::vector<TapeRecord> records_;
};

/// Produces an output through the tape when one is given, else as a plain
/// constant. Ops call this so they work identically with and without a tape.
template <typename Backward>
Tensor emit(Tape* tape, std::string op, std::initializer_list<Tensor> inputs, Shape shape,
            std::vector<double> values, Backward&& backward) {
    if (tape) {
        return tape->record(std::move(op), inputs, std::move(shape), std::move(values),
                            std::forward<Backward>(backward));
    }
    return Tape::constant(op, std::move(shape), std::move(values));
}

}  // namespace funet
