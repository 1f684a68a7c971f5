// Times one training iteration and one eval forward for a given network size.
#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "funet/data.hpp"
#include "funet/training.hpp"

int main(int argc, char** argv) {
    using clock = std::chrono::steady_clock;
    funet::NetworkSpec spec;
    spec.depth = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 3;
    spec.base_channels = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 16;
    const std::size_t batch = argc > 3 ? std::strtoul(argv[3], nullptr, 10) : 5;
    spec.variant = argc > 4 && std::string(argv[4]) == "plain" ? funet::Variant::plain : funet::Variant::bru;

    funet::SynthConfig cfg;
    cfg.count = batch;
    const auto data = funet::generate(cfg);
    auto net = funet::Network::build(spec, std::uint64_t{1});
    std::vector<std::size_t> idx(batch);
    for (std::size_t i = 0; i < batch; ++i) idx[i] = i;
    const auto b = funet::make_batch(data, idx);
    funet::AdamOptimizer adam(net);
    funet::LossConfig loss;

    const int reps = 5;
    const auto t0 = clock::now();
    for (int r = 0; r < reps; ++r) {
        funet::Tape tape;
        net.zero_grad();
        const auto probs = net.forward(b.images, funet::Mode::train, &tape);
        const auto step = funet::loss_step(probs, b.labels, loss, &tape);
        tape.backward(step.loss);
        adam.step(net.parameters(), 1e-3);
    }
    const auto t1 = clock::now();
    for (int r = 0; r < reps; ++r) (void)net.predict(b.images);
    const auto t2 = clock::now();
    std::printf("params=%zu  train_iter=%.1f ms  eval_forward(batch %zu)=%.1f ms\n", net.parameter_count(),
                std::chrono::duration<double, std::milli>(t1 - t0).count() / reps, batch,
                std::chrono::duration<double, std::milli>(t2 - t1).count() / reps);
}
