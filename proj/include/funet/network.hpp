#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "funet/errors.hpp"
#include "funet/ops.hpp"
#include "funet/tensor.hpp"

namespace funet {

enum class Variant { plain, bru };

inline std::string to_string(Variant v) { return v == Variant::plain ? "plain" : "bru"; }

inline Variant parse_variant(const std::string& text) {
    if (text == "plain") return Variant::plain;
    if (text == "bru") return Variant::bru;
    throw ConfigError("variant: unknown value '" + text + "' (expected plain|bru)");
}

struct NetworkSpec {
    Variant variant = Variant::bru;
    std::size_t depth = 4;
    std::size_t base_channels = 16;
    std::size_t num_classes = 3;
    double dropout_rate = 0.25;
    std::size_t input_channels = 1;

    void validate() const {
        if (depth < 1 || depth > 8) throw ConfigError("depth must be in [1, 8], got " + std::to_string(depth));
        if (base_channels < 1) throw ConfigError("base_channels must be positive");
        if (num_classes < 2) throw ConfigError("num_classes must be at least 2, got " + std::to_string(num_classes));
        if (input_channels < 1) throw ConfigError("input_channels must be positive");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw ConfigError("dropout_rate must lie in [0, 1), got " + std::to_string(dropout_rate));
        }
    }

    /// Feature channels at resolution level d (0 = full resolution).
    std::size_t channels_at(std::size_t level) const { return base_channels << level; }

    /// Input height and width must be multiples of this.
    std::size_t size_divisor() const { return std::size_t{1} << depth; }

    bool operator==(const NetworkSpec&) const = default;
};

struct Parameter {
    std::string name;
    Tensor tensor;
};

/// U-net with either plain or batch-norm + residual layers. Parameters and
/// running statistics have stable names in a canonical order.
class Network {
public:
    static Network build(const NetworkSpec& spec, std::mt19937_64& rng) {
        spec.validate();
        Network net;
        net.spec_ = spec;
        net.dropout_rng_.seed(rng());
        const auto depth = spec.depth;
        for (std::size_t d = 0; d < depth; ++d) {
            const auto in = d == 0 ? spec.input_channels : spec.channels_at(d - 1);
            net.encoders_.push_back(net.make_block("enc" + std::to_string(d), in, spec.channels_at(d), rng));
        }
        net.bottleneck_ = net.make_block("mid", spec.channels_at(depth - 1), spec.channels_at(depth), rng);
        net.ups_.resize(depth);
        net.decoders_.resize(depth);
        for (std::size_t d = depth; d-- > 0;) {
            const auto ch = spec.channels_at(d);
            net.ups_[d] = net.make_conv("up" + std::to_string(d), 2 * ch, ch, 2, true, rng, true);
            net.decoders_[d] = net.make_block("dec" + std::to_string(d), 2 * ch, ch, rng);
        }
        net.head_ = net.make_conv("head", spec.base_channels, spec.num_classes, 1, true, rng);
        return net;
    }

    static Network build(const NetworkSpec& spec, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        return build(spec, rng);
    }

    Network(Network&&) = default;
    Network& operator=(Network&&) = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    /// Deep copy: parameters, running statistics and dropout rng state.
    Network clone() const {
        Network copy;
        copy.spec_ = spec_;
        copy.encoders_ = encoders_;
        copy.bottleneck_ = bottleneck_;
        copy.ups_ = ups_;
        copy.decoders_ = decoders_;
        copy.head_ = head_;
        copy.bn_states_ = bn_states_;
        copy.bn_names_ = bn_names_;
        copy.dropout_rng_ = dropout_rng_;
        for (const auto& p : params_) {
            copy.params_.push_back({p.name, Tensor::from(p.tensor.shape(),
                                                         std::vector<double>(p.tensor.values().begin(), p.tensor.values().end()),
                                                         true)});
        }
        return copy;
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& p : params_) total += p.tensor.size();
        return total;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

    const std::vector<BatchNormState>& batch_norm_states() const noexcept { return bn_states_; }
    const std::vector<std::string>& batch_norm_names() const noexcept { return bn_names_; }

    /// Returns the N x C x H x W softmax probabilities. Train mode uses batch
    /// statistics and dropout and updates the running statistics.
    Tensor forward(const Tensor& images, Mode mode, Tape* tape = nullptr) {
        if (mode == Mode::eval) return predict(images, tape);
        return softmax_channels(run_logits(images, Mode::train, tape, &bn_states_, &dropout_rng_), tape);
    }

    /// Eval-mode forward; reads the network only.
    Tensor predict(const Tensor& images, Tape* tape = nullptr) const {
        return softmax_channels(run_logits(images, Mode::eval, tape, nullptr, nullptr), tape);
    }

    /// Pre-softmax class scores in eval mode.
    Tensor logits(const Tensor& images) const {
        return run_logits(images, Mode::eval, nullptr, nullptr, nullptr);
    }

    void save(const std::string& path) const;
    static Network load(const std::string& path);

private:
    static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

    struct ConvRef {
        std::size_t kernel = kNone;
        std::size_t bias = kNone;
    };
    struct BnRef {
        std::size_t gamma = kNone;
        std::size_t beta = kNone;
        std::size_t state = kNone;
    };
    struct Block {
        ConvRef conv1, conv2;
        BnRef bn1, bn2;
        std::optional<ConvRef> projection;
        BnRef projection_bn;
    };

    Network() = default;

    std::size_t add_param(std::string name, Tensor t) {
        params_.push_back({std::move(name), std::move(t)});
        return params_.size() - 1;
    }

    ConvRef make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool bias,
                      std::mt19937_64& rng, bool transposed = false) {
        const Shape shape = transposed ? Shape{in, out, k, k} : Shape{out, in, k, k};
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
        std::vector<double> w(shape_size(shape));
        for (double& v : w) v = normal(rng);
        ConvRef ref;
        ref.kernel = add_param(name + ".weight", Tensor::from(shape, std::move(w), true));
        if (bias) ref.bias = add_param(name + ".bias", Tensor::zeros({out}, true));
        return ref;
    }

    BnRef make_bn(const std::string& name, std::size_t channels) {
        BnRef ref;
        ref.gamma = add_param(name + ".gamma", Tensor::full({channels}, 1.0, true));
        ref.beta = add_param(name + ".beta", Tensor::zeros({channels}, true));
        bn_states_.push_back(BatchNormState::fresh(channels));
        bn_names_.push_back(name);
        ref.state = bn_states_.size() - 1;
        return ref;
    }

    Block make_block(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
        Block b;
        if (spec_.variant == Variant::plain) {
            b.conv1 = make_conv(name + ".conv1", in, out, 3, true, rng);
            b.conv2 = make_conv(name + ".conv2", out, out, 3, true, rng);
            return b;
        }
        // Convolutions feeding batch norm carry no bias: the mean subtraction
        // would cancel it and leave it with an identically zero gradient.
        b.conv1 = make_conv(name + ".conv1", in, out, 3, false, rng);
        b.bn1 = make_bn(name + ".bn1", out);
        b.conv2 = make_conv(name + ".conv2", out, out, 3, false, rng);
        b.bn2 = make_bn(name + ".bn2", out);
        if (in != out) {
            b.projection = make_conv(name + ".proj", in, out, 1, false, rng);
            b.projection_bn = make_bn(name + ".proj_bn", out);
        }
        return b;
    }

    const Tensor& param(std::size_t i) const {
        static const Tensor kUndefined;
        return i == kNone ? kUndefined : params_[i].tensor;
    }

    Tensor conv(const ConvRef& c, const Tensor& x, Tape* tape) const {
        return conv2d(x, param(c.kernel), param(c.bias), Padding::same, tape);
    }

    Tensor norm(const BnRef& bn, const Tensor& x, Mode mode, Tape* tape,
                std::vector<BatchNormState>* states) const {
        if (mode == Mode::train) return batch_norm_train(x, param(bn.gamma), param(bn.beta), (*states)[bn.state], tape);
        return batch_norm_eval(x, param(bn.gamma), param(bn.beta), bn_states_[bn.state], tape);
    }

    Tensor block(const Block& b, const Tensor& x, Mode mode, Tape* tape,
                 std::vector<BatchNormState>* states) const {
        if (spec_.variant == Variant::plain) {
            return relu(conv(b.conv2, relu(conv(b.conv1, x, tape), tape), tape), tape);
        }
        Tensor h = relu(norm(b.bn1, conv(b.conv1, x, tape), mode, tape, states), tape);
        h = norm(b.bn2, conv(b.conv2, h, tape), mode, tape, states);
        const Tensor shortcut = b.projection ? norm(b.projection_bn, conv(*b.projection, x, tape), mode, tape, states) : x;
        return relu(add(h, shortcut, tape), tape);
    }

    void check_input(const Tensor& images) const {
        const std::string op = "forward";
        if (images.rank() != 4) throw ShapeError(op, "input rank", 4, images.rank());
        if (images.dim(1) != spec_.input_channels) throw ShapeError(op, "input channels", spec_.input_channels, images.dim(1));
        const auto div = spec_.size_divisor();
        if (images.dim(2) % div) {
            throw ShapeError(op, "height", std::to_string(images.dim(2)) + " is not divisible by " + std::to_string(div));
        }
        if (images.dim(3) % div) {
            throw ShapeError(op, "width", std::to_string(images.dim(3)) + " is not divisible by " + std::to_string(div));
        }
    }

    // `states` and `rng` are only used (and must be non-null) in train mode.
    Tensor run_logits(const Tensor& images, Mode mode, Tape* tape, std::vector<BatchNormState>* states,
                      std::mt19937_64* rng) const {
        check_input(images);
        const auto drop = [&](const Tensor& t) {
            return mode == Mode::train ? dropout(t, spec_.dropout_rate, mode, *rng, tape) : t;
        };
        std::vector<Tensor> skips;
        Tensor x = images;
        for (const auto& enc : encoders_) {
            x = drop(block(enc, x, mode, tape, states));
            skips.push_back(x);
            x = max_pool2(x, tape);
        }
        x = drop(block(bottleneck_, x, mode, tape, states));
        for (std::size_t d = spec_.depth; d-- > 0;) {
            const Tensor up = up_conv2_halving(x, param(ups_[d].kernel), param(ups_[d].bias), tape);
            x = block(decoders_[d], concat_channels(skips[d], up, tape), mode, tape, states);
        }
        return conv(head_, x, tape);
    }

    NetworkSpec spec_;
    std::vector<Parameter> params_;
    std::vector<BatchNormState> bn_states_;
    std::vector<std::string> bn_names_;
    std::vector<Block> encoders_;
    Block bottleneck_;
    std::vector<ConvRef> ups_;
    std::vector<Block> decoders_;
    ConvRef head_;
    std::mt19937_64 dropout_rng_;
};

// ---- Model file ---------------------------------------------------------------
//
//   "FUNET1\n"
//   key=value spec lines, then an empty line
//   per entry: name line, shape line (space separated extents),
//              raw little-endian IEEE-754 binary64 values
//
// Entries are the parameters in canonical order followed by each batch-norm
// layer's running_mean and running_var.

inline constexpr const char* kModelMagic = "FUNET1\n";

namespace detail {

struct ModelEntry {
    std::string name;
    Shape shape;
    std::vector<double>* values;
    const std::vector<double>* const_values;
};

inline std::uint64_t fnv1a(std::uint64_t hash, const std::string& text) {
    for (const unsigned char ch : text) {
        hash ^= ch;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

inline std::string shape_line(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(shape[i]);
    }
    return out;
}

inline void write_le_doubles(std::ostream& out, std::span<const double> values) {
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (std::size_t b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void read_le_doubles(std::istream& in, std::span<double> values, const std::string& name) {
    std::vector<unsigned char> bytes(values.size() * 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
        throw FormatError("model file truncated inside entry '" + name + "'");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (std::size_t b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        values[i] = std::bit_cast<double>(bits);
    }
}

inline std::string read_line(std::istream& in, const std::string& what) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("model file truncated: expected " + what);
    return line;
}

}  // namespace detail

inline std::string format_spec_block(const NetworkSpec& spec) {
    std::ostringstream os;
    os.precision(17);
    os << "variant=" << to_string(spec.variant) << '\n'
       << "depth=" << spec.depth << '\n'
       << "base_channels=" << spec.base_channels << '\n'
       << "num_classes=" << spec.num_classes << '\n'
       << "dropout_rate=" << spec.dropout_rate << '\n'
       << "input_channels=" << spec.input_channels << '\n';
    return os.str();
}

inline void Network::save(const std::string& path) const {
    std::vector<std::pair<std::string, Shape>> layout;
    for (const auto& p : params_) layout.emplace_back(p.name, p.tensor.shape());
    for (std::size_t i = 0; i < bn_states_.size(); ++i) {
        layout.emplace_back(bn_names_[i] + ".running_mean", Shape{bn_states_[i].running_mean.size()});
        layout.emplace_back(bn_names_[i] + ".running_var", Shape{bn_states_[i].running_var.size()});
    }
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (const auto& [name, shape] : layout) hash = detail::fnv1a(hash, name + ":" + detail::shape_line(shape) + ";");

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write model file " + path);
    std::ostringstream hex;
    hex << std::hex << hash;
    out << kModelMagic << format_spec_block(spec_) << "entries=" << layout.size() << '\n'
        << "layout_hash=" << hex.str() << "\n\n";
    std::size_t k = 0;
    for (const auto& p : params_) {
        out << layout[k].first << '\n' << detail::shape_line(layout[k].second) << '\n';
        detail::write_le_doubles(out, p.tensor.values());
        ++k;
    }
    for (const auto& st : bn_states_) {
        for (const auto* v : {&st.running_mean, &st.running_var}) {
            out << layout[k].first << '\n' << detail::shape_line(layout[k].second) << '\n';
            detail::write_le_doubles(out, *v);
            ++k;
        }
    }
    if (!out) throw FormatError("write failed for " + path);
}

inline Network Network::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open model file " + path);
    std::string magic(std::strlen(kModelMagic), '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!in || magic != kModelMagic) throw FormatError(path + ": bad magic (not a FUNET1 model file)");

    std::map<std::string, std::string> kv;
    for (;;) {
        const std::string line = detail::read_line(in, "spec block");
        if (line.empty()) break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError(path + ": malformed spec line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const auto field = [&](const std::string& key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw FormatError(path + ": spec block lacks '" + key + "'");
        return it->second;
    };
    NetworkSpec spec;
    try {
        spec.variant = parse_variant(field("variant"));
        spec.depth = std::stoul(field("depth"));
        spec.base_channels = std::stoul(field("base_channels"));
        spec.num_classes = std::stoul(field("num_classes"));
        spec.dropout_rate = std::stod(field("dropout_rate"));
        spec.input_channels = std::stoul(field("input_channels"));
        spec.validate();
    } catch (const ConfigError& e) {
        throw FormatError(path + ": invalid spec block: " + e.what());
    } catch (const std::logic_error&) {
        throw FormatError(path + ": invalid number in spec block");
    }

    Network net = build(spec, std::uint64_t{0});
    std::vector<std::pair<std::string, std::span<double>>> targets;
    for (auto& p : net.params_) targets.emplace_back(p.name, p.tensor.mutable_values());
    for (std::size_t i = 0; i < net.bn_states_.size(); ++i) {
        targets.emplace_back(net.bn_names_[i] + ".running_mean", net.bn_states_[i].running_mean);
        targets.emplace_back(net.bn_names_[i] + ".running_var", net.bn_states_[i].running_var);
    }
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Shape shape = i < net.params_.size() ? net.params_[i].tensor.shape() : Shape{targets[i].second.size()};
        hash = detail::fnv1a(hash, targets[i].first + ":" + detail::shape_line(shape) + ";");
    }
    std::ostringstream hex;
    hex << std::hex << hash;
    if (field("entries") != std::to_string(targets.size()) || field("layout_hash") != hex.str()) {
        throw FormatError(path + ": parameter layout does not match the spec block");
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& [name, values] = targets[i];
        const std::string got = detail::read_line(in, "entry name");
        if (got != name) throw FormatError(path + ": expected entry '" + name + "', found '" + got + "'");
        const Shape shape = i < net.params_.size() ? net.params_[i].tensor.shape() : Shape{values.size()};
        if (detail::read_line(in, "shape of " + name) != detail::shape_line(shape)) {
            throw FormatError(path + ": shape mismatch for entry '" + name + "'");
        }
        detail::read_le_doubles(in, values, name);
        for (const double v : values) {
            if (!std::isfinite(v)) throw FormatError(path + ": non-finite value in entry '" + name + "'");
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after last entry");
    return net;
}

}  // namespace funet
