#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "support.hpp"

using namespace funet;
using support::random_labels;
using support::random_tensor;
using support::TempDir;

namespace {

NetworkSpec make_spec(Variant v, std::size_t depth, std::size_t base, std::size_t classes = 3,
                      std::size_t in = 1) {
    NetworkSpec s;
    s.variant = v;
    s.depth = depth;
    s.base_channels = base;
    s.num_classes = classes;
    s.input_channels = in;
    return s;
}

// Hand count: 3x3 conv weights + biases (plain) or 3x3 convs + BN gamma/beta +
// optional 1x1 projection with its BN (bru); 2x2 transposed convs with bias;
// 1x1 head with bias.
std::size_t analytic_count(const NetworkSpec& s) {
    const auto block = [&](std::size_t in, std::size_t out) -> std::size_t {
        if (s.variant == Variant::plain) return 9 * in * out + out + 9 * out * out + out;
        std::size_t n = 9 * in * out + 2 * out + 9 * out * out + 2 * out;
        if (in != out) n += in * out + 2 * out;
        return n;
    };
    std::size_t total = 0, in = s.input_channels;
    for (std::size_t d = 0; d < s.depth; ++d) {
        const std::size_t out = s.base_channels << d;
        total += block(in, out);
        in = out;
    }
    total += block(in, s.base_channels << s.depth);
    for (std::size_t d = s.depth; d-- > 0;) {
        const std::size_t ch = s.base_channels << d;
        total += 2 * ch * ch * 4 + ch;  // up-conv 2ch -> ch
        total += block(2 * ch, ch);
    }
    return total + s.base_channels * s.num_classes + s.num_classes;
}

Tensor images(std::mt19937_64& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return random_tensor(rng, {n, c, h, w}, false, 0.0, 1.0);
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(NetworkSpec, ValidationRejectsBadFields) {
    EXPECT_NO_THROW(NetworkSpec{}.validate());
    auto bad = [](auto mutate) {
        NetworkSpec s;
        mutate(s);
        EXPECT_THROW(s.validate(), ConfigError);
    };
    bad([](NetworkSpec& s) { s.depth = 0; });
    bad([](NetworkSpec& s) { s.base_channels = 0; });
    bad([](NetworkSpec& s) { s.num_classes = 1; });
    bad([](NetworkSpec& s) { s.dropout_rate = 1.0; });
    bad([](NetworkSpec& s) { s.dropout_rate = -0.1; });
    bad([](NetworkSpec& s) { s.input_channels = 0; });
}

TEST(NetworkSpec, ChannelsDoublePerLevel) {
    const auto s = make_spec(Variant::bru, 4, 16);
    EXPECT_EQ(s.channels_at(0), 16u);
    EXPECT_EQ(s.channels_at(3), 128u);
    EXPECT_EQ(s.size_divisor(), 16u);
}

TEST(Network, SmallestPlainCountByHand) {
    // enc0: 1->2 (18+2, 36+2), mid: 2->4 (72+4, 144+4), up0: 4->2 (32+2),
    // dec0: 4->2 (72+2, 36+2), head: 2->2 (4+2).
    const auto net = Network::build(make_spec(Variant::plain, 1, 2, 2), 1);
    EXPECT_EQ(net.parameter_count(), 434u);
}

TEST(Network, ParameterCountMatchesAnalyticFormula) {
    for (const auto v : {Variant::plain, Variant::bru}) {
        for (std::size_t depth = 1; depth <= 4; ++depth) {
            for (const std::size_t base : {2u, 3u, 16u}) {
                const auto spec = make_spec(v, depth, base, 3, depth % 2 ? 1 : 2);
                EXPECT_EQ(Network::build(spec, 0).parameter_count(), analytic_count(spec))
                    << to_string(v) << " depth " << depth << " base " << base;
            }
        }
    }
}

TEST(Network, BruHasMoreParametersThanPlain) {
    for (std::size_t depth = 1; depth <= 3; ++depth) {
        EXPECT_GT(Network::build(make_spec(Variant::bru, depth, 4), 0).parameter_count(),
                  Network::build(make_spec(Variant::plain, depth, 4), 0).parameter_count());
    }
}

TEST(Network, SameSeedSameParameters) {
    const auto spec = make_spec(Variant::bru, 2, 4);
    const auto a = Network::build(spec, 42), b = Network::build(spec, 42), c = Network::build(spec, 43);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        EXPECT_EQ(vals(a.parameters()[i].tensor), vals(b.parameters()[i].tensor));
        any_diff = any_diff || vals(a.parameters()[i].tensor) != vals(c.parameters()[i].tensor);
    }
    EXPECT_TRUE(any_diff);
}

TEST(Network, NamesUniqueAndInitializationFollowsConvention) {
    const auto net = Network::build(make_spec(Variant::bru, 3, 8), 3);
    std::set<std::string> names;
    for (const auto& p : net.parameters()) {
        EXPECT_TRUE(names.insert(p.name).second) << p.name;
        const auto v = p.tensor.values();
        const auto ends_with = [&](const std::string& suffix) {
            return p.name.size() >= suffix.size() && p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (ends_with(".bias") || ends_with(".beta")) {
            for (const double x : v) EXPECT_EQ(x, 0.0) << p.name;
        } else if (ends_with(".gamma")) {
            for (const double x : v) EXPECT_EQ(x, 1.0) << p.name;
        } else {
            ASSERT_TRUE(ends_with(".weight")) << p.name;
            const auto& s = p.tensor.shape();
            // Transposed kernels are Cin x Cout x 2 x 2; ordinary ones Cout x Cin x k x k.
            const bool transposed = p.name.rfind("up", 0) == 0;
            const double fan_in = static_cast<double>((transposed ? s[0] : s[1]) * s[2] * s[3]);
            double sq = 0.0;
            for (const double x : v) sq += x * x;
            const double empirical = std::sqrt(sq / static_cast<double>(v.size()));
            if (v.size() >= 500) EXPECT_NEAR(empirical / std::sqrt(2.0 / fan_in), 1.0, 0.15) << p.name;
        }
    }
}

TEST(Network, ForwardShapesAndSimplex) {
    std::mt19937_64 rng(2);
    auto net = Network::build(make_spec(Variant::bru, 3, 4), 1);
    const auto x = images(rng, 2, 1, 32, 32);
    const auto p = net.predict(x);
    EXPECT_EQ(p.shape(), (Shape{2, 3, 32, 32}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t xx = 0; xx < 32; ++xx) {
                double s = 0;
                for (std::size_t c = 0; c < 3; ++c) s += p.at(n, c, y, xx);
                ASSERT_NEAR(s, 1.0, 1e-9);
            }
    EXPECT_EQ(net.forward(x, Mode::train).shape(), (Shape{2, 3, 32, 32}));
}

TEST(Network, ShapeInvarianceAcrossSpecs) {
    std::mt19937_64 rng(6);
    for (const auto v : {Variant::plain, Variant::bru}) {
        for (std::size_t depth = 1; depth <= 3; ++depth) {
            const auto spec = make_spec(v, depth, 2, 4, 2);
            auto net = Network::build(spec, depth);
            const std::size_t div = spec.size_divisor();
            const auto x = images(rng, 1, 2, 2 * div, 3 * div);
            EXPECT_EQ(net.predict(x).shape(), (Shape{1, 4, 2 * div, 3 * div}));
            EXPECT_EQ(net.forward(x, Mode::train).shape(), (Shape{1, 4, 2 * div, 3 * div}));
        }
    }
}

TEST(Network, IndivisibleInputNamesDivisor) {
    std::mt19937_64 rng(2);
    const auto net = Network::build(make_spec(Variant::plain, 3, 2), 1);
    try {
        net.predict(images(rng, 1, 1, 20, 16));
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.dimension(), "height");
        EXPECT_NE(std::string(e.what()).find("divisible by 8"), std::string::npos) << e.what();
    }
    EXPECT_THROW(net.predict(images(rng, 1, 2, 16, 16)), ShapeError);
}

TEST(Network, EvalForwardIsDeterministicAndReadOnly) {
    std::mt19937_64 rng(9);
    auto net = Network::build(make_spec(Variant::bru, 2, 4), 1);
    const auto x = images(rng, 2, 1, 16, 16);
    net.forward(x, Mode::train);  // move the running statistics off their initial values
    const auto states = net.batch_norm_states();
    const auto a = vals(net.predict(x));
    EXPECT_EQ(vals(net.predict(x)), a);
    EXPECT_EQ(vals(net.forward(x, Mode::eval)), a);
    for (std::size_t i = 0; i < states.size(); ++i) {
        EXPECT_EQ(states[i].running_mean, net.batch_norm_states()[i].running_mean);
        EXPECT_EQ(states[i].running_var, net.batch_norm_states()[i].running_var);
    }
}

TEST(Network, TrainForwardUpdatesRunningStatistics) {
    std::mt19937_64 rng(9);
    auto net = Network::build(make_spec(Variant::bru, 1, 2), 1);
    const auto before = net.batch_norm_states();
    net.forward(images(rng, 2, 1, 8, 8), Mode::train);
    EXPECT_NE(before[0].running_mean, net.batch_norm_states()[0].running_mean);
}

TEST(Network, EveryParameterReceivesGradient) {
    for (const auto v : {Variant::plain, Variant::bru}) {
        std::mt19937_64 rng(13);
        auto net = Network::build(make_spec(v, 2, 4), 5);
        std::vector<double> mass(net.parameters().size(), 0.0);
        for (int batch = 0; batch < 5; ++batch) {
            const auto x = images(rng, 2, 1, 16, 16);
            const auto labels = random_labels(rng, {2, 16, 16}, 3);
            Tape tape;
            net.zero_grad();
            const auto step = loss_step(net.forward(x, Mode::train, &tape), labels, LossConfig{}, &tape);
            tape.backward(step.loss);
            for (std::size_t i = 0; i < mass.size(); ++i) {
                for (const double g : net.parameters()[i].tensor.grad()) mass[i] += std::abs(g);
            }
        }
        for (std::size_t i = 0; i < mass.size(); ++i) {
            EXPECT_GT(mass[i], 0.0) << to_string(v) << ' ' << net.parameters()[i].name;
        }
    }
}

TEST(Network, AllZeroWeightsGiveUniformSoftmax) {
    std::mt19937_64 rng(1);
    for (const auto v : {Variant::plain, Variant::bru}) {
        auto net = Network::build(make_spec(v, 2, 4, 4), 2);
        for (auto& p : net.parameters()) {
            for (auto& x : p.tensor.mutable_values()) x = 0.0;
        }
        const auto x = images(rng, 2, 1, 16, 16);
        for (const auto mode : {Mode::train, Mode::eval}) {
            const auto probs = net.forward(x, mode);
            for (const double p : probs.values()) ASSERT_DOUBLE_EQ(p, 0.25);
        }
    }
}

TEST(Network, CloneIsIndependent) {
    std::mt19937_64 rng(4);
    auto net = Network::build(make_spec(Variant::bru, 1, 2), 1);
    auto copy = net.clone();
    const auto x = images(rng, 1, 1, 8, 8);
    EXPECT_EQ(vals(copy.predict(x)), vals(net.predict(x)));
    for (auto& v : copy.parameters()[0].tensor.mutable_values()) v += 1.0;
    copy.forward(x, Mode::train);
    EXPECT_NE(vals(copy.parameters()[0].tensor), vals(net.parameters()[0].tensor));
    EXPECT_NE(copy.batch_norm_states()[0].running_mean, net.batch_norm_states()[0].running_mean);
}

TEST(Network, ConcurrentEvalMatchesSerial) {
    std::mt19937_64 rng(5);
    const auto net = Network::build(make_spec(Variant::bru, 2, 4), 1);
    const auto x = images(rng, 1, 1, 16, 16);
    const auto expected = vals(net.predict(x));
    std::vector<std::vector<double>> out(3);
    std::vector<std::thread> threads;
    for (auto& o : out) threads.emplace_back([&] { o = vals(net.predict(x)); });
    for (auto& t : threads) t.join();
    for (const auto& o : out) EXPECT_EQ(o, expected);
}

// ---- serialization ---------------------------------------------------------------

TEST(ModelFile, RoundTripIsBitExactIncludingRunningStats) {
    TempDir dir("model");
    std::mt19937_64 rng(21);
    for (const auto v : {Variant::plain, Variant::bru}) {
        auto net = Network::build(make_spec(v, 2, 4), 8);
        for (int i = 0; i < 3; ++i) net.forward(images(rng, 2, 1, 16, 16), Mode::train);
        net.save(dir / "m.funet");
        const auto loaded = Network::load(dir / "m.funet");
        EXPECT_EQ(loaded.spec(), net.spec());
        ASSERT_EQ(loaded.parameters().size(), net.parameters().size());
        for (std::size_t i = 0; i < net.parameters().size(); ++i) {
            EXPECT_EQ(loaded.parameters()[i].name, net.parameters()[i].name);
            EXPECT_EQ(vals(loaded.parameters()[i].tensor), vals(net.parameters()[i].tensor));
        }
        for (std::size_t i = 0; i < net.batch_norm_states().size(); ++i) {
            EXPECT_EQ(loaded.batch_norm_states()[i].running_mean, net.batch_norm_states()[i].running_mean);
            EXPECT_EQ(loaded.batch_norm_states()[i].running_var, net.batch_norm_states()[i].running_var);
        }
        const auto x = images(rng, 2, 1, 16, 16);
        EXPECT_EQ(vals(loaded.predict(x)), vals(net.predict(x)));
    }
}

TEST(ModelFile, BeginsWithMagicAndSpecBlock) {
    TempDir dir("model");
    Network::build(make_spec(Variant::bru, 2, 4), 1).save(dir / "m.funet");
    std::ifstream in(dir / "m.funet", std::ios::binary);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "FUNET1");
    std::getline(in, line);
    EXPECT_EQ(line, "variant=bru");
    std::getline(in, line);
    EXPECT_EQ(line, "depth=2");
}

TEST(ModelFile, CorruptionIsFormatError) {
    TempDir dir("model");
    Network::build(make_spec(Variant::plain, 1, 2), 1).save(dir / "m.funet");
    const auto bytes = read_file(dir / "m.funet");
    const auto write = [&](const std::string& name, std::vector<std::uint8_t> b) {
        write_file(dir / name, b);
        return dir / name;
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(Network::load(write("magic", bad_magic)), FormatError);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    EXPECT_THROW(Network::load(write("trunc", truncated)), FormatError);

    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(Network::load(write("trail", trailing)), FormatError);

    std::string text(bytes.begin(), bytes.end());
    text.replace(text.find("base_channels=2"), 15, "base_channels=3");
    EXPECT_THROW(Network::load(write("layout", {text.begin(), text.end()})), FormatError);

    EXPECT_THROW(Network::load(dir / "missing"), FormatError);
}
