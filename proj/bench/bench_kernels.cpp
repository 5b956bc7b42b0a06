// Parallel kernels against the serial reference implementations.

#include <benchmark/benchmark.h>

#include "llrn/kernels.hpp"
#include "llrn/ops.hpp"
#include "llrn/reference.hpp"
#include "llrn/rng.hpp"

namespace {

using llrn::Tensor;
using llrn::kernels::MatrixView;
using llrn::kernels::Transpose;

Tensor<float> random_tensor(llrn::Shape shape, std::uint64_t seed) {
  llrn::Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor<float> a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  Tensor<float> c({n, n});
  for (auto _ : state) {
    MatrixView<const float> va(a.data(), n, n), vb(b.data(), n, n);
    MatrixView<float> vc(c.data(), n, n);
    if constexpr (Parallel) {
      llrn::kernels::gemm(Transpose::No, Transpose::No, 1.0f, va, vb, 0.0f, vc);
    } else {
      llrn::reference::gemm(Transpose::No, Transpose::No, 1.0f, va, vb, 0.0f, vc);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor<float> x = random_tensor({8, c, 16, 16}, 3);
  const Tensor<float> k = random_tensor({c, c, 3, 3}, 4);
  for (auto _ : state) {
    Tensor<float> y = Parallel ? llrn::ops::conv2d(x, k, 1, 1) : llrn::reference::conv2d(x, k, 1, 1);
    benchmark::DoNotOptimize(y.data());
  }
}

BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_Conv2d<true>)->Name("conv2d/parallel")->Arg(16)->Arg(64);
BENCHMARK(BM_Conv2d<false>)->Name("conv2d/reference")->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
