// Serial reference kernels against their OpenMP counterparts, plus a full
// forward pass at the default model size.
#include <benchmark/benchmark.h>

#include <random>

#include "detox/kernels.hpp"
#include "detox/model.hpp"
#include "detox/weights.hpp"

using namespace detox;

namespace {

std::vector<float> filled(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

// Shapes mirror one MLP up-projection: [seq, d] x [d_mlp, d]^T.
template <auto Kernel>
void BM_matmul_nt(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), k = static_cast<std::size_t>(state.range(1)),
               m = static_cast<std::size_t>(state.range(2));
    const auto x = filled(n * k, 1), w = filled(m * k, 2);
    std::vector<float> y(n * m);
    for (auto _ : state) {
        Kernel(x.data(), w.data(), y.data(), n, k, m);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * m));
}

template <auto Kernel>
void BM_matmul_tn_acc(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), m = static_cast<std::size_t>(state.range(1)),
               k = static_cast<std::size_t>(state.range(2));
    const auto dy = filled(n * m, 3), x = filled(n * k, 4);
    std::vector<float> dw(m * k);
    for (auto _ : state) {
        Kernel(dy.data(), x.data(), dw.data(), n, m, k);
        benchmark::DoNotOptimize(dw.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * m));
}

void BM_forward_default(benchmark::State& state) {
    ModelConfig c;
    c.vocab_size = 511;
    const auto w = init_weights(c, 0);
    std::vector<TokenId> tokens(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<TokenId>(2 + i % 500);
    for (auto _ : state) benchmark::DoNotOptimize(forward(w, tokens).logits.data());
}

}  // namespace

BENCHMARK(BM_matmul_nt<kernels::serial::matmul_nt<float>>)->Name("matmul_nt/serial")->Args({64, 128, 512})->Args({64, 512, 128});
BENCHMARK(BM_matmul_nt<kernels::omp::matmul_nt<float>>)->Name("matmul_nt/omp")->Args({64, 128, 512})->Args({64, 512, 128});
BENCHMARK(BM_matmul_tn_acc<kernels::serial::matmul_tn_acc<float>>)->Name("matmul_tn_acc/serial")->Args({64, 512, 128});
BENCHMARK(BM_matmul_tn_acc<kernels::omp::matmul_tn_acc<float>>)->Name("matmul_tn_acc/omp")->Args({64, 512, 128});
BENCHMARK(BM_forward_default)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
