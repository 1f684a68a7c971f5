#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "funet/errors.hpp"
#include "funet/label_map.hpp"
#include "funet/tensor.hpp"

namespace funet {

/// One grayscale image in [0, 1] with its class mask, both row-major H x W.
struct Sample {
    std::string id;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> image;
    std::vector<int> mask;

    bool operator==(const Sample&) const = default;
};

using Dataset = std::vector<Sample>;

/// Class ids used by the synthetic generator.
enum SynthClass : int { kBackground = 0, kLargeStructure = 1, kSmallStructure = 2 };
inline constexpr std::size_t kSynthClasses = 3;

struct SynthConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t count = 310;
    double small_fraction = 0.02;
    double large_fraction = 0.15;
    double noise_std = 0.08;
    double background_intensity = 0.2;
    double large_intensity = 0.5;
    double small_intensity = 0.65;
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 8 || width < 8) throw ConfigError("height and width must be at least 8");
        if (count < 1) throw ConfigError("count must be positive");
        if (!(small_fraction > 0.0 && small_fraction < 1.0)) throw ConfigError("small_fraction must lie in (0, 1)");
        if (!(large_fraction > 0.0 && large_fraction < 1.0)) throw ConfigError("large_fraction must lie in (0, 1)");
        if (!(small_fraction < large_fraction)) throw ConfigError("small_fraction must be below large_fraction");
        if (!(large_fraction <= 0.4)) throw ConfigError("large_fraction must be at most 0.4 so background stays the majority class");
        if (!(noise_std >= 0.0 && std::isfinite(noise_std))) throw ConfigError("noise_std must be non-negative");
        for (const double v : {background_intensity, large_intensity, small_intensity}) {
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("class intensities must lie in [0, 1]");
        }
    }
};

/// Fraction of all pixels in the dataset that belong to the small structure.
inline double small_class_fraction(const Dataset& data) {
    std::size_t small = 0, total = 0;
    for (const auto& s : data) {
        small += static_cast<std::size_t>(std::count(s.mask.begin(), s.mask.end(), kSmallStructure));
        total += s.mask.size();
    }
    return total ? static_cast<double>(small) / static_cast<double>(total) : 0.0;
}

namespace detail {

struct Ellipse {
    double cy, cx, a, b, angle;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = dx * c + dy * s;
        const double v = -dx * s + dy * c;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }

    double half_extent_x() const {
        const double c = std::cos(angle), s = std::sin(angle);
        return std::sqrt(a * a * c * c + b * b * s * s);
    }
    double half_extent_y() const {
        const double c = std::cos(angle), s = std::sin(angle);
        return std::sqrt(a * a * s * s + b * b * c * c);
    }
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline double gaussian(std::mt19937_64& rng) {
    // Box-Muller on two open-interval uniforms.
    const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Ellipse of roughly `area` pixels with random aspect ratio and orientation.
inline Ellipse random_shape(std::mt19937_64& rng, double area) {
    const double ratio = uniform(rng, 0.6, 1.0);
    const double a = std::sqrt(area / (std::numbers::pi * ratio));
    return {0.0, 0.0, a, a * ratio, uniform(rng, 0.0, std::numbers::pi)};
}

inline std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Nested-ellipse family: a large structure with a small one strictly
/// inside it, class-dependent intensity plus Gaussian noise. Images are
/// quantized to 8 bits so in-memory samples equal their on-disk form.
inline Dataset generate(const SynthConfig& config) {
    config.validate();
    const auto h = config.height, w = config.width;
    const double pixels = static_cast<double>(h * w);
    std::mt19937_64 rng(config.seed);
    Dataset out;
    out.reserve(config.count);
    constexpr int kShapeAttempts = 200;
    constexpr int kPlacementAttempts = 200;

    for (std::size_t n = 0; n < config.count; ++n) {
        std::vector<int> mask;
        bool placed = false;
        for (int attempt = 0; attempt < kShapeAttempts && !placed; ++attempt) {
            auto large = detail::random_shape(rng, config.large_fraction * pixels * detail::uniform(rng, 0.8, 1.2));
            const double ex = large.half_extent_x() + 1.0, ey = large.half_extent_y() + 1.0;
            if (2 * ex >= static_cast<double>(w) - 1 || 2 * ey >= static_cast<double>(h) - 1) continue;
            large.cx = detail::uniform(rng, ex, static_cast<double>(w) - 1.0 - ex);
            large.cy = detail::uniform(rng, ey, static_cast<double>(h) - 1.0 - ey);

            auto small = detail::random_shape(rng, config.small_fraction * pixels * detail::uniform(rng, 0.8, 1.2));
            for (int k = 0; k < kPlacementAttempts && !placed; ++k) {
                small.cx = detail::uniform(rng, large.cx - large.a, large.cx + large.a);
                small.cy = detail::uniform(rng, large.cy - large.a, large.cy + large.a);
                if (!large.contains(small.cy, small.cx)) continue;
                mask.assign(h * w, kBackground);
                std::size_t n_large = 0, n_small = 0;
                bool contained = true;
                for (std::size_t y = 0; y < h && contained; ++y) {
                    for (std::size_t x = 0; x < w; ++x) {
                        const double py = static_cast<double>(y), px = static_cast<double>(x);
                        if (small.contains(py, px)) {
                            // Small-class pixels need all 4 neighbours inside the large structure.
                            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !large.contains(py - 1, px) ||
                                !large.contains(py + 1, px) || !large.contains(py, px - 1) ||
                                !large.contains(py, px + 1)) {
                                contained = false;
                                break;
                            }
                            mask[y * w + x] = kSmallStructure;
                            ++n_small;
                        } else if (large.contains(py, px)) {
                            mask[y * w + x] = kLargeStructure;
                            ++n_large;
                        }
                    }
                }
                const std::size_t n_background = h * w - n_large - n_small;
                placed = contained && n_small > 0 && n_small < n_large && n_large < n_background;
            }
        }
        if (!placed) {
            throw GenerationError("generate: could not place nested structures for sample " + std::to_string(n) +
                                  " (small_fraction=" + std::to_string(config.small_fraction) +
                                  ", large_fraction=" + std::to_string(config.large_fraction) + " at " +
                                  std::to_string(h) + "x" + std::to_string(w) + ")");
        }

        Sample s;
        std::ostringstream id;
        id << "s" << std::setw(4) << std::setfill('0') << n;
        s.id = id.str();
        s.height = h;
        s.width = w;
        s.mask = std::move(mask);
        s.image.resize(h * w);
        for (std::size_t i = 0; i < h * w; ++i) {
            const double mean = s.mask[i] == kSmallStructure   ? config.small_intensity
                                : s.mask[i] == kLargeStructure ? config.large_intensity
                                                               : config.background_intensity;
            s.image[i] = detail::quantize(mean + config.noise_std * detail::gaussian(rng)) / 255.0;
        }
        out.push_back(std::move(s));
    }

    const double achieved = small_class_fraction(out);
    if (achieved < 0.5 * config.small_fraction || achieved > 1.5 * config.small_fraction) {
        throw GenerationError("generate: achieved small-class fraction " + std::to_string(achieved) +
                              " is not within 50% of the target " + std::to_string(config.small_fraction));
    }
    return out;
}

// ---- PGM ------------------------------------------------------------------------
//
// Binary greymap, "P5", maxval 255, row-major. Images hold round(x * 255);
// masks hold raw class indices.

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;
};

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
    const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
    return bytes;
}

inline GrayImage decode_pgm(std::span<const std::uint8_t> bytes, const std::string& source = "pgm") {
    std::size_t pos = 0;
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError(source + ": not a binary PGM (missing P5 magic)");
    pos = 2;
    const auto next_number = [&](const char* what) -> std::size_t {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError(source + ": malformed header (" + what + ")");
        std::size_t value = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            value = value * 10 + (bytes[pos] - '0');
            if (value > 1u << 24) throw FormatError(source + ": header value too large (" + what + ")");
            ++pos;
        }
        return value;
    };
    GrayImage img;
    img.width = next_number("width");
    img.height = next_number("height");
    const auto maxval = next_number("maxval");
    if (maxval != 255) throw FormatError(source + ": maxval must be 255, got " + std::to_string(maxval));
    if (img.width == 0 || img.height == 0) throw FormatError(source + ": zero-sized image");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(source + ": malformed header terminator");
    ++pos;
    const std::size_t n = img.width * img.height;
    if (bytes.size() - pos < n) throw FormatError(source + ": truncated payload");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + path);
}

inline void save_sample(const Sample& s, const std::string& image_path, const std::string& mask_path) {
    GrayImage img{s.width, s.height, std::vector<std::uint8_t>(s.image.size())};
    GrayImage mask{s.width, s.height, std::vector<std::uint8_t>(s.mask.size())};
    for (std::size_t i = 0; i < s.image.size(); ++i) {
        img.pixels[i] = detail::quantize(s.image[i]);
        if (s.mask[i] < 0 || s.mask[i] > 255) throw FormatError("save_sample: mask value out of byte range");
        mask.pixels[i] = static_cast<std::uint8_t>(s.mask[i]);
    }
    write_file(image_path, encode_pgm(img));
    write_file(mask_path, encode_pgm(mask));
}

inline Sample load_sample(const std::string& id, const std::string& image_path, const std::string& mask_path,
                          std::size_t num_classes) {
    const GrayImage img = decode_pgm(read_file(image_path), image_path);
    const GrayImage mask = decode_pgm(read_file(mask_path), mask_path);
    if (img.width != mask.width || img.height != mask.height) {
        throw FormatError(id + ": image and mask sizes differ");
    }
    Sample s{id, img.height, img.width, std::vector<double>(img.pixels.size()), std::vector<int>(mask.pixels.size())};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        s.image[i] = img.pixels[i] / 255.0;
        if (mask.pixels[i] >= num_classes) {
            throw FormatError(mask_path + ": mask value " + std::to_string(mask.pixels[i]) + " >= num_classes " +
                              std::to_string(num_classes));
        }
        s.mask[i] = mask.pixels[i];
    }
    return s;
}

// ---- Manifest ---------------------------------------------------------------------
//
// CSV "id,image_path,mask_path", paths relative to the manifest's directory.

inline constexpr const char* kManifestHeader = "id,image_path,mask_path";

struct ManifestRow {
    std::string id;
    std::string image_path;
    std::string mask_path;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ostringstream os;
    os << kManifestHeader << '\n';
    for (const auto& r : rows) os << r.id << ',' << r.image_path << ',' << r.mask_path << '\n';
    const std::string text = os.str();
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open manifest " + path);
    std::string line;
    if (!std::getline(in, line) || line != kManifestHeader) {
        throw FormatError(path + ": expected header '" + kManifestHeader + "'");
    }
    std::vector<ManifestRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ManifestRow r;
        std::istringstream fields(line);
        if (!std::getline(fields, r.id, ',') || !std::getline(fields, r.image_path, ',') ||
            !std::getline(fields, r.mask_path) || r.id.empty()) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected 3 fields");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Writes every sample as images/<id>.pgm and masks/<id>.pgm below `dir`
/// plus dir/manifest.csv. Returns the manifest path.
inline std::string save_dataset(const Dataset& data, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::vector<ManifestRow> rows;
    for (const auto& s : data) {
        ManifestRow r{s.id, "images/" + s.id + ".pgm", "masks/" + s.id + ".pgm"};
        save_sample(s, (fs::path(dir) / r.image_path).string(), (fs::path(dir) / r.mask_path).string());
        rows.push_back(std::move(r));
    }
    const auto manifest = (fs::path(dir) / "manifest.csv").string();
    write_manifest(manifest, rows);
    return manifest;
}

inline Dataset load_dataset(const std::string& manifest_path, std::size_t num_classes) {
    namespace fs = std::filesystem;
    const auto base = fs::path(manifest_path).parent_path();
    Dataset out;
    for (const auto& r : read_manifest(manifest_path)) {
        out.push_back(load_sample(r.id, (base / r.image_path).string(), (base / r.mask_path).string(), num_classes));
    }
    return out;
}

// ---- Splits and batches ---------------------------------------------------------------

struct Split {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Seeded uniform random partition into n_train / n_val / remainder.
inline Split split(const Dataset& data, std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
    if (n_train + n_val > data.size()) {
        throw UsageError("split: " + std::to_string(n_train) + " train + " + std::to_string(n_val) +
                         " val exceeds " + std::to_string(data.size()) + " samples");
    }
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    Split out;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& dst = i < n_train ? out.train : i < n_train + n_val ? out.val : out.test;
        dst.push_back(data[order[i]]);
    }
    return out;
}

struct Batch {
    Tensor images;  // N x 1 x H x W
    LabelMap labels;
};

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
    if (indices.empty()) throw UsageError("make_batch: empty batch");
    const auto h = data.at(indices[0]).height, w = data.at(indices[0]).width;
    std::vector<double> pixels;
    std::vector<int> labels;
    pixels.reserve(indices.size() * h * w);
    labels.reserve(indices.size() * h * w);
    for (const auto i : indices) {
        const auto& s = data.at(i);
        if (s.height != h || s.width != w) {
            throw ShapeError("make_batch", "image size", s.id + " is " + std::to_string(s.height) + "x" +
                                                             std::to_string(s.width) + ", batch is " +
                                                             std::to_string(h) + "x" + std::to_string(w));
        }
        pixels.insert(pixels.end(), s.image.begin(), s.image.end());
        labels.insert(labels.end(), s.mask.begin(), s.mask.end());
    }
    const auto n = indices.size();
    return {Tensor::from({n, 1, h, w}, std::move(pixels)), LabelMap::from({n, h, w}, std::move(labels))};
}

inline Batch make_batch(const Sample& s) {
    return {Tensor::from({1, 1, s.height, s.width}, s.image), LabelMap::from({1, s.height, s.width}, s.mask)};
}

}  // namespace funet
