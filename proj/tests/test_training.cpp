#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "support.hpp"

using namespace funet;
using funet::support::TempDir;

namespace {

NetworkSpec tiny_spec(Variant v = Variant::bru) {
    NetworkSpec s;
    s.variant = v;
    s.depth = 2;
    s.base_channels = 4;
    return s;
}

Dataset tiny_data(std::size_t count, std::uint64_t seed = 5) {
    SynthConfig c;
    c.height = c.width = 32;
    c.count = count;
    c.seed = seed;
    return generate(c);
}

std::vector<double> flat_params(const Network& net) {
    std::vector<double> out;
    for (const auto& p : net.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

void fill_grads(Network& net, double g) {
    // A loss of g * sum(theta) gives every parameter gradient g.
    Tape tape;
    net.zero_grad();
    Tensor total;
    bool first = true;
    for (auto& p : net.parameters()) {
        const Tensor gs = Tensor::from(p.tensor.shape(), std::vector<double>(p.tensor.size(), g));
        const Tensor s = sum(mul(p.tensor, gs, &tape), &tape);
        total = first ? s : add(total, s, &tape);
        first = false;
    }
    tape.backward(total);
}

}  // namespace

TEST(Hyperparams, DefaultsAndValidation) {
    Hyperparams hp;
    EXPECT_EQ(hp.batch_size, 5u);
    EXPECT_EQ(hp.learning_rate, 0.001);
    EXPECT_EQ(hp.epochs, 400u);
    EXPECT_EQ(hp.adam.beta1, 0.9);
    EXPECT_EQ(hp.adam.beta2, 0.999);
    EXPECT_EQ(hp.adam.epsilon, 1e-8);
    // 200/100/50 training images give 40/20/10 iterations.
    EXPECT_EQ(hp.iterations_for(200), 40u);
    EXPECT_EQ(hp.iterations_for(100), 20u);
    EXPECT_EQ(hp.iterations_for(50), 10u);
    EXPECT_EQ(hp.iterations_for(7), 2u);
    hp.iterations_per_epoch = 3;
    EXPECT_EQ(hp.iterations_for(200), 3u);

    EXPECT_NO_THROW(Hyperparams{}.validate(5));
    EXPECT_THROW(Hyperparams{}.validate(4), ConfigError);
    auto with = [](auto edit) {
        Hyperparams h;
        edit(h);
        return h;
    };
    EXPECT_THROW(with([](Hyperparams& h) { h.batch_size = 0; }).validate(10), ConfigError);
    EXPECT_THROW(with([](Hyperparams& h) { h.epochs = 0; }).validate(10), ConfigError);
    EXPECT_THROW(with([](Hyperparams& h) { h.learning_rate = 0; }).validate(10), ConfigError);
    EXPECT_THROW(with([](Hyperparams& h) { h.learning_rate = std::nan(""); }).validate(10), ConfigError);
    EXPECT_THROW(with([](Hyperparams& h) { h.loss.beta = -1; }).validate(10), ConfigError);
}

TEST(Adam, MomentsMatchParameterShapes) {
    const Network net = Network::build(tiny_spec(), 1);
    const AdamOptimizer adam(net);
    ASSERT_EQ(adam.first_moments().size(), net.parameters().size());
    for (std::size_t k = 0; k < net.parameters().size(); ++k) {
        EXPECT_EQ(adam.first_moments()[k].size(), net.parameters()[k].tensor.size());
        EXPECT_EQ(adam.second_moments()[k].size(), net.parameters()[k].tensor.size());
    }
    EXPECT_EQ(adam.steps(), 0u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Network net = Network::build(tiny_spec(), 2);
    const auto before = flat_params(net);
    AdamOptimizer adam(net);
    fill_grads(net, 0.0);
    adam.step(net.parameters(), 0.001);
    EXPECT_EQ(flat_params(net), before);
    EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, FirstStepsMatchHandTrace) {
    Network net = Network::build(tiny_spec(), 3);
    const auto theta0 = flat_params(net);
    AdamOptimizer adam(net);
    const double lr = 0.01, g1 = 0.37, g2 = -0.2;

    fill_grads(net, g1);
    adam.step(net.parameters(), lr);
    // m = 0.1 g, v = 0.001 g^2; bias correction gives m^ = g, v^ = g^2.
    const double d1 = lr * g1 / (std::abs(g1) + 1e-8);
    const auto theta1 = flat_params(net);
    for (std::size_t i = 0; i < theta0.size(); ++i) ASSERT_NEAR(theta1[i], theta0[i] - d1, 1e-15);

    fill_grads(net, g2);
    adam.step(net.parameters(), lr);
    const double m = 0.9 * 0.1 * g1 + 0.1 * g2;
    const double v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
    const double d2 = lr * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    const auto theta2 = flat_params(net);
    for (std::size_t i = 0; i < theta0.size(); ++i) ASSERT_NEAR(theta2[i], theta1[i] - d2, 1e-15);
}

TEST(Adam, MissingGradientRejected) {
    Network net = Network::build(tiny_spec(), 4);
    AdamOptimizer adam(net);
    // Never reached by a backward pass, so no gradient buffers exist.
    EXPECT_THROW(adam.step(net.parameters(), 0.001), UsageError);
    Network other = Network::build(tiny_spec(Variant::plain), 4);
    fill_grads(other, 1.0);
    if (other.parameters().size() != net.parameters().size()) {
        EXPECT_THROW(adam.step(other.parameters(), 0.001), UsageError);
    }
}

TEST(Adam, RepeatedRunsBitIdentical) {
    auto run = [] {
        Network net = Network::build(tiny_spec(), 6);
        AdamOptimizer adam(net);
        const Dataset data = tiny_data(2);
        const std::vector<std::size_t> idx{0, 1};
        const Batch b = make_batch(data, idx);
        for (int i = 0; i < 10; ++i) {
            Tape tape;
            net.zero_grad();
            const auto step = loss_step(net.forward(b.images, Mode::train, &tape), b.labels, LossConfig{}, &tape);
            tape.backward(step.loss);
            adam.step(net.parameters(), 0.001);
        }
        return flat_params(net);
    };
    EXPECT_EQ(run(), run());
}

class TrainFixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = new Dataset(tiny_data(14));
        parts_ = new Split(split(*data_, 8, 3, 1));
    }
    static void TearDownTestSuite() {
        delete parts_;
        delete data_;
    }
    static Hyperparams hp(WeightMode mode, std::size_t epochs) {
        Hyperparams h;
        h.batch_size = 2;
        h.epochs = epochs;
        h.learning_rate = 0.003;
        h.loss = {mode, 3.0};
        h.seed = 13;
        return h;
    }
    static inline Dataset* data_ = nullptr;
    static inline Split* parts_ = nullptr;
};

TEST_F(TrainFixture, Deterministic) {
    const auto h = hp(WeightMode::feedback, 2);
    auto a = train(Network::build(tiny_spec(), 8), parts_->train, parts_->val, h);
    auto b = train(Network::build(tiny_spec(), 8), parts_->train, parts_->val, h);
    EXPECT_EQ(flat_params(a.network), flat_params(b.network));
    ASSERT_EQ(a.log.iterations.size(), 8u);
    for (std::size_t i = 0; i < a.log.iterations.size(); ++i) {
        EXPECT_EQ(a.log.iterations[i].loss, b.log.iterations[i].loss);
        EXPECT_EQ(a.log.iterations[i].mean_weight, b.log.iterations[i].mean_weight);
        EXPECT_EQ(a.log.iterations[i].step, i);
        EXPECT_EQ(a.log.iterations[i].epoch, i / 4);
    }
    EXPECT_EQ(a.log.best_epoch, b.log.best_epoch);
}

TEST_F(TrainFixture, ReturnsBestValidationCheckpoint) {
    std::vector<std::vector<double>> per_epoch;
    auto cb = [&](const EpochLog& e, const TrainLog& log) {
        EXPECT_EQ(log.epochs.back().epoch, e.epoch);
        per_epoch.push_back({static_cast<double>(e.epoch), e.mean_val_dice});
    };
    auto r = train(Network::build(tiny_spec(), 9), parts_->train, parts_->val, hp(WeightMode::feedback, 6), cb);
    ASSERT_EQ(r.log.epochs.size(), 6u);
    ASSERT_EQ(per_epoch.size(), 6u);
    double best = -1;
    for (const auto& e : r.log.epochs) best = std::max(best, e.mean_val_dice);
    EXPECT_EQ(r.log.best_val_dice, best);
    EXPECT_EQ(r.log.epochs[r.log.best_epoch].mean_val_dice, best);
    EXPECT_GE(best, r.log.epochs.back().mean_val_dice);
    // The returned network really is the snapshot that scored `best`.
    EXPECT_EQ(mean_foreground_dice(r.network, parts_->val), best);
}

TEST_F(TrainFixture, WithoutValidationReturnsFinalNetwork) {
    auto r = train(Network::build(tiny_spec(), 9), parts_->train, {}, hp(WeightMode::uniform, 2));
    EXPECT_TRUE(r.log.epochs.empty());
    EXPECT_EQ(r.log.best_epoch, 1u);
}

TEST_F(TrainFixture, MeanFeedbackWeightFallsOverTraining) {
    auto r = train(Network::build(tiny_spec(), 10), parts_->train, {}, hp(WeightMode::feedback, 15));
    const auto& it = r.log.iterations;
    const std::size_t decile = it.size() / 10;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < decile; ++i) {
        first += it[i].mean_weight;
        last += it[it.size() - 1 - i].mean_weight;
    }
    EXPECT_GT(first, last) << "first decile " << first / decile << " last decile " << last / decile;
    for (const auto& x : it) {
        EXPECT_GE(x.mean_weight, 0.01);
        EXPECT_LE(x.mean_weight, 1.0);
    }
}

TEST_F(TrainFixture, UniformModeLogsUnitWeights) {
    auto r = train(Network::build(tiny_spec(), 10), parts_->train, {}, hp(WeightMode::uniform, 1));
    for (const auto& x : r.log.iterations) EXPECT_EQ(x.mean_weight, 1.0);
}

TEST_F(TrainFixture, NonFiniteLossAborts) {
    Network net = Network::build(tiny_spec(), 11);
    auto& p = net.parameters().front().tensor;
    p.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(std::move(net), parts_->train, parts_->val, hp(WeightMode::feedback, 1));
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("parameter norm"), std::string::npos) << e.what();
    }
}

TEST_F(TrainFixture, BatchLargerThanTrainingSetRejected) {
    auto h = hp(WeightMode::feedback, 1);
    h.batch_size = 9;
    EXPECT_THROW(train(Network::build(tiny_spec(), 1), parts_->train, {}, h), ConfigError);
}

TEST(InitialLoss, UniformBaselineIsLnC) {
    const Dataset data = tiny_data(2);
    const std::vector<std::size_t> idx{0, 1};
    const Batch b = make_batch(data, idx);
    for (const auto v : {Variant::plain, Variant::bru}) {
        Network net = Network::build(tiny_spec(v), 1);
        for (auto& p : net.parameters()) {
            if (p.name.rfind("head.", 0) == 0) {
                auto x = p.tensor.mutable_values();
                std::fill(x.begin(), x.end(), 0.0);
            }
        }
        const auto step = loss_step(net.forward(b.images, Mode::train), b.labels, {WeightMode::uniform, 3.0});
        EXPECT_NEAR(step.loss.item(), std::log(3.0), 0.2 * std::log(3.0));
    }
}

TEST(Evaluate, RowCountAndOrder) {
    const Dataset test = tiny_data(3);
    const Network net = Network::build(tiny_spec(), 2);
    const auto fg = evaluate(net, test);
    ASSERT_EQ(fg.records.size(), 3u * 2u);
    EXPECT_EQ(fg.records[0].image_id, test[0].id);
    EXPECT_EQ(fg.records[0].class_id, 1);
    EXPECT_EQ(fg.records[1].class_id, 2);
    EXPECT_EQ(fg.summary.size(), 2u);
    const auto all = evaluate(net, test, true);
    EXPECT_EQ(all.records.size(), 3u * 3u);
    EXPECT_EQ(all.records[0].class_id, 0);
    EXPECT_THROW(evaluate(net, {}), UsageError);
}

TEST(Evaluate, Deterministic) {
    const Dataset test = tiny_data(3);
    const Network net = Network::build(tiny_spec(), 3);
    const auto a = evaluate(net, test), b = evaluate(net, test);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].dice, b.records[i].dice);
}

TEST(Evaluate, GroundTruthOracleScoresOne) {
    // One-hot probabilities built from the mask go through the same argmax and
    // dice path that evaluate uses.
    for (const auto& s : tiny_data(4)) {
        const std::size_t hw = s.height * s.width;
        std::vector<double> p(3 * hw, 0.0);
        for (std::size_t i = 0; i < hw; ++i) p[static_cast<std::size_t>(s.mask[i]) * hw + i] = 1.0;
        const LabelMap pred = argmax_labels(Tensor::from({1, 3, s.height, s.width}, std::move(p)));
        const Batch b = make_batch(s);
        for (int c = 0; c < 3; ++c) EXPECT_EQ(dice(pred, b.labels, c).value, 1.0);
    }
}

TEST(Evaluate, ShapeMismatchRejected) {
    SynthConfig c;
    c.height = c.width = 30;  // not divisible by 4
    c.count = 1;
    c.seed = 1;
    EXPECT_THROW(evaluate(Network::build(tiny_spec(), 1), generate(c)), ShapeError);
}

TEST(LogCsv, HeadersAndRows) {
    TrainLog log;
    log.iterations = {{0, 0, 1.5, 0.75}, {1, 0, 1.25, 0.5}};
    log.epochs = {{0, 0.625}};
    TempDir dir("logs");
    write_train_log_csv(dir / "t.csv", log);
    write_validation_csv(dir / "v.csv", log);
    auto lines = [](const std::string& path) {
        std::ifstream in(path);
        std::vector<std::string> out;
        for (std::string l; std::getline(in, l);) out.push_back(l);
        return out;
    };
    EXPECT_EQ(lines(dir / "t.csv"), (std::vector<std::string>{"step,epoch,loss,mean_weight", "0,0,1.5,0.75", "1,0,1.25,0.5"}));
    EXPECT_EQ(lines(dir / "v.csv"), (std::vector<std::string>{"epoch,mean_val_dice", "0,0.625"}));
}
