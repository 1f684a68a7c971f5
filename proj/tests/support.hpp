#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "funet/funet.hpp"

namespace funet::support {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline LabelMap random_labels(std::mt19937_64& rng, Shape shape, int classes) {
    std::uniform_int_distribution<int> dist(0, classes - 1);
    std::vector<int> v(shape_size(shape));
    for (auto& x : v) x = dist(rng);
    return LabelMap::from(std::move(shape), std::move(v));
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&, Tape*)>;

struct GradCheck {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

// Elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor). The
// floor keeps entries whose true gradient is ~0 from dividing round-off by
// round-off.
inline constexpr double kRelFloor = 1e-6;

/// Central differences of f around the current leaf values versus the tape
/// gradient.
inline GradCheck check_gradients(std::vector<Tensor> leaves, const ScalarFn& f, double h = 1e-5) {
    for (auto& l : leaves) l.zero_grad();
    Tape tape;
    const Tensor loss = f(leaves, &tape);
    tape.backward(loss);

    GradCheck out;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        auto x = leaf.mutable_values();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double saved = x[i];
            x[i] = saved + h;
            const double up = f(leaves, nullptr).item();
            x[i] = saved - h;
            const double down = f(leaves, nullptr).item();
            x[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double err = std::abs(a - numeric);
            out.max_abs_error = std::max(out.max_abs_error, err);
            out.max_rel_error = std::max(out.max_rel_error, err / std::max({std::abs(a), std::abs(numeric), kRelFloor}));
            ++out.checked;
        }
    }
    return out;
}

/// sum(t * r) for a fixed random r: gives every output element a distinct
/// upstream gradient.
inline Tensor project(const Tensor& t, const Tensor& r, Tape* tape) { return sum(mul(t, r, tape), tape); }

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() / ("funet_" + tag + "_" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace funet::support
