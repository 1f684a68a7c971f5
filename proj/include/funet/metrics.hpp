#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "funet/errors.hpp"
#include "funet/label_map.hpp"
#include "funet/tensor.hpp"

namespace funet {

/// Per-pixel channel argmax; ties go to the lowest class index.
inline LabelMap argmax_labels(const Tensor& probs) {
    if (probs.rank() != 4) throw ShapeError("argmax_labels", "probabilities rank", 4, probs.rank());
    const auto n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    const auto hw = h * w;
    const auto p = probs.values();
    LabelMap out{{n, h, w}, std::vector<int>(n * hw)};
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < hw; ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < c; ++k) {
                if (p[(b * c + k) * hw + i] > p[(b * c + best) * hw + i]) best = k;
            }
            out.labels[b * hw + i] = static_cast<int>(best);
        }
    }
    return out;
}

struct DiceScore {
    double value = 0.0;
    bool degenerate = false;  // class absent from both masks
};

/// 2|P n T| / (|P| + |T|) for one class; 1.0 (flagged) when both are empty.
inline DiceScore dice(const LabelMap& pred, const LabelMap& truth, int class_id) {
    if (pred.shape != truth.shape) {
        throw ShapeError("dice", "mask shape", shape_string(pred.shape) + " vs " + shape_string(truth.shape));
    }
    std::size_t p = 0, t = 0, both = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool in_p = pred.labels[i] == class_id;
        const bool in_t = truth.labels[i] == class_id;
        p += in_p;
        t += in_t;
        both += in_p && in_t;
    }
    if (p + t == 0) return {1.0, true};
    return {2.0 * static_cast<double>(both) / static_cast<double>(p + t), false};
}

// ---- Student t distribution -------------------------------------------------

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIterations = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIterations; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    throw NumericalError("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0 && b > 0.0)) throw DomainError("incomplete_beta: a and b must be positive");
    if (!(x >= 0.0 && x <= 1.0)) throw DomainError("incomplete_beta: x outside [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// P(T <= t) for Student's t with `df` degrees of freedom.
inline double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw DomainError("student_t_cdf: df must be positive");
    const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    return t >= 0.0 ? 1.0 - tail : tail;
}

/// Two-tailed P(|T| >= |t|).
inline double student_t_two_tailed(double t, double df) {
    if (!(df > 0.0)) throw DomainError("student_t_two_tailed: df must be positive");
    return std::min(1.0, incomplete_beta(0.5 * df, 0.5, df / (df + t * t)));
}

struct TTestResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
    bool degenerate = false;  // all differences zero
};

/// Paired two-tailed t-test on a - b.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw UsageError("paired_t_test: length mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    }
    const std::size_t n = a.size();
    if (n < 2) throw UsageError("paired_t_test: need at least 2 pairs, got " + std::to_string(n));
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double df = static_cast<double>(n - 1);
    if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) {
        return {0.0, df, 1.0, true};
    }
    double mean = 0.0;
    for (const double v : d) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (const double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / df);
    if (sd == 0.0) {
        // Constant nonzero difference: infinitely significant.
        return {mean > 0 ? std::numeric_limits<double>::infinity()
                         : -std::numeric_limits<double>::infinity(),
                df, 0.0, false};
    }
    const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
    return {t, df, student_t_two_tailed(t, df), false};
}

// ---- Per-image results --------------------------------------------------------

struct DiceRecord {
    std::string image_id;
    int class_id = 0;
    double dice = 0.0;
    bool degenerate = false;
};

struct ClassSummary {
    int class_id = 0;
    std::size_t count = 0;
    double mean = 0.0;
    double std = 0.0;
    bool single_sample = false;  // std reported as 0
};

/// Per-class mean and sample (n-1) standard deviation, ordered by class id.
inline std::vector<ClassSummary> summarize(const std::vector<DiceRecord>& records) {
    if (records.empty()) throw UsageError("summarize: no dice records");
    std::map<int, std::vector<double>> by_class;
    for (const auto& r : records) by_class[r.class_id].push_back(r.dice);
    std::vector<ClassSummary> out;
    for (auto& [cls, values] : by_class) {
        // Sorting first makes the floating-point sum independent of image order.
        std::sort(values.begin(), values.end());
        ClassSummary s;
        s.class_id = cls;
        s.count = values.size();
        double total = 0.0;
        for (const double v : values) total += v;
        s.mean = total / static_cast<double>(values.size());
        if (values.size() == 1) {
            s.single_sample = true;
        } else {
            double ss = 0.0;
            for (const double v : values) ss += (v - s.mean) * (v - s.mean);
            s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
        out.push_back(s);
    }
    return out;
}

struct ComparisonRow {
    int class_id = 0;
    std::string method_a;
    std::string method_b;
    TTestResult test;
};

/// Pairs the two runs by image id within each class and t-tests a - b.
/// Both runs must cover exactly the same (image, class) pairs.
inline std::vector<ComparisonRow> compare_runs(const std::vector<DiceRecord>& a,
                                               const std::vector<DiceRecord>& b,
                                               const std::string& name_a, const std::string& name_b) {
    using Key = std::pair<int, std::string>;
    std::map<Key, double> lhs, rhs;
    for (const auto& r : a) {
        if (!lhs.emplace(Key{r.class_id, r.image_id}, r.dice).second) {
            throw FormatError("compare: duplicate row for image '" + r.image_id + "' class " + std::to_string(r.class_id));
        }
    }
    for (const auto& r : b) {
        if (!rhs.emplace(Key{r.class_id, r.image_id}, r.dice).second) {
            throw FormatError("compare: duplicate row for image '" + r.image_id + "' class " + std::to_string(r.class_id));
        }
    }
    for (const auto& [key, _] : lhs) {
        if (!rhs.count(key)) throw FormatError("compare: image '" + key.second + "' class " + std::to_string(key.first) + " missing from " + name_b);
    }
    for (const auto& [key, _] : rhs) {
        if (!lhs.count(key)) throw FormatError("compare: image '" + key.second + "' class " + std::to_string(key.first) + " missing from " + name_a);
    }
    std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_class;
    for (const auto& [key, value] : lhs) {
        by_class[key.first].first.push_back(value);
        by_class[key.first].second.push_back(rhs.at(key));
    }
    std::vector<ComparisonRow> rows;
    for (const auto& [cls, pair] : by_class) {
        rows.push_back({cls, name_a, name_b, paired_t_test(pair.first, pair.second)});
    }
    return rows;
}

// ---- CSV ------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "image_id,class_id,dice";
inline constexpr const char* kComparisonHeader = "class_id,method_a,method_b,t,df,p";

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline void write_metrics_csv(const std::string& path, const std::vector<DiceRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write metrics file " + path);
    out << kMetricsHeader << '\n';
    for (const auto& r : records) out << r.image_id << ',' << r.class_id << ',' << format_double(r.dice) << '\n';
    if (!out) throw FormatError("write failed for " + path);
}

inline std::vector<DiceRecord> read_metrics_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open metrics file " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw FormatError(path + ": expected header '" + kMetricsHeader + "'");
    }
    std::vector<DiceRecord> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id, cls, value;
        if (!std::getline(row, id, ',') || !std::getline(row, cls, ',') || !std::getline(row, value)) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected 3 fields");
        }
        try {
            std::size_t used = 0;
            DiceRecord r{id, std::stoi(cls, &used), 0.0, false};
            if (used != cls.size()) throw std::invalid_argument(cls);
            r.dice = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": malformed number");
        }
    }
    return out;
}

inline void write_comparison_csv(const std::string& path, const std::vector<ComparisonRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write comparison file " + path);
    out << kComparisonHeader << '\n';
    for (const auto& r : rows) {
        out << r.class_id << ',' << r.method_a << ',' << r.method_b << ',' << format_double(r.test.t)
            << ',' << format_double(r.test.df) << ',' << format_double(r.test.p) << '\n';
    }
    if (!out) throw FormatError("write failed for " + path);
}

}  // namespace funet
