// Reference (serial direct loop) vs parallel (im2col + GEMM, OpenMP over the batch)
// convolution kernels on shapes taken from the two networks.

#include <random>

#include <benchmark/benchmark.h>

#include "cmc/kernels.hpp"
#include "cmc/parallel.hpp"

namespace {

using cmc::Tensor;
using cmc::kernels::ConvGeometry;

struct Case {
    cmc::Shape input;
    ConvGeometry geom;
};

// 0: U-Net first level on a batch of 128x128 slices; 1: classifier stage on a volume batch.
Case make_case(int which) {
    if (which == 0) return {{8, 1, 1, 128, 128}, {1, 16, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}}};
    return {{4, 16, 16, 32, 32}, {16, 32, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}}};
}

Tensor random_tensor(const cmc::Shape& s, std::uint64_t seed) {
    Tensor t(s);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

template <bool Parallel>
void bm_conv_forward(benchmark::State& state) {
    const auto c = make_case(static_cast<int>(state.range(0)));
    const Tensor x = random_tensor(c.input, 1);
    const Tensor w = random_tensor(c.geom.weight_shape(), 2);
    const Tensor b = random_tensor({c.geom.out_channels}, 3);
    for (auto _ : state) {
        Tensor y = Parallel ? cmc::kernels::conv3d_forward(x, w, b, c.geom)
                            : cmc::kernels::reference::conv3d_forward(x, w, b, c.geom);
        benchmark::DoNotOptimize(y.data());
    }
    state.counters["threads"] = Parallel ? cmc::max_threads() : 1;
}

template <bool Parallel>
void bm_conv_backward(benchmark::State& state) {
    const auto c = make_case(static_cast<int>(state.range(0)));
    const Tensor x = random_tensor(c.input, 1);
    const Tensor w = random_tensor(c.geom.weight_shape(), 2);
    const Tensor dy = random_tensor(c.geom.output_shape(c.input), 4);
    for (auto _ : state) {
        Tensor dx(c.input), dw(w.shape()), db({c.geom.out_channels});
        if (Parallel) {
            cmc::kernels::conv3d_backward(x, w, dy, c.geom, &dx, dw, db);
        } else {
            cmc::kernels::reference::conv3d_backward(x, w, dy, c.geom, &dx, dw, db);
        }
        benchmark::DoNotOptimize(dx.data());
    }
    state.counters["threads"] = Parallel ? cmc::max_threads() : 1;
}

}  // namespace

BENCHMARK(bm_conv_forward<false>)->Name("conv_forward/reference")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_conv_forward<true>)->Name("conv_forward/parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_conv_backward<false>)->Name("conv_backward/reference")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_conv_backward<true>)->Name("conv_backward/parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
