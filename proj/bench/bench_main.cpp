#include <benchmark/benchmark.h>

#include <vector>

#include "roomroam/kernels.hpp"
#include "roomroam/layout.hpp"
#include "roomroam/model.hpp"
#include "roomroam/random.hpp"
#include "roomroam/rdwsim.hpp"

using namespace roomroam;

namespace {

std::vector<double> random_matrix(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> m(n);
  for (double& v : m) v = rng.normal(0.0, 1.0);
  return m;
}

template <auto Gemm>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n * n, 1), b = random_matrix(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Gemm(n, n, n, {a.data(), n}, {b.data(), n}, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}
BENCHMARK(BM_Gemm<kernels::serial::gemm>)->Name("gemm/serial")->Arg(64)->Arg(197)->Arg(384);
BENCHMARK(BM_Gemm<kernels::omp::gemm>)->Name("gemm/omp")->Arg(64)->Arg(197)->Arg(384);

// Short walks keep one iteration in the tens of milliseconds.
SimConfig short_walks() {
  SimConfig cfg;
  cfg.episode_distance = 50.0;
  return cfg;
}

template <auto Estimate>
void BM_Estimate(benchmark::State& state) {
  const Layout layout = sample_layout(7, 5);
  const SimConfig cfg = short_walks();
  for (auto _ : state) benchmark::DoNotOptimize(Estimate(layout, cfg, static_cast<int>(state.range(0)), 3, {}));
}
BENCHMARK(BM_Estimate<estimate_resets_serial>)->Name("estimate_resets/serial")->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Estimate<estimate_resets>)->Name("estimate_resets/omp")->Arg(8)->Unit(benchmark::kMillisecond);

template <auto Backward>
void BM_Backward(benchmark::State& state) {
  ModelConfig mc;
  mc.image_size = 224;
  mc.patch_size = 16;
  mc.embed_dim = 32;
  mc.depth = 2;
  mc.heads = 2;
  const ModelParams p = init_params(mc, 1, 250.0);
  std::vector<BinaryImage> images;
  std::vector<double> labels;
  for (int i = 0; i < state.range(0); ++i) {
    images.push_back(layout_to_image(sample_layout(derive_seed(5, i), 3 + i % 3)));
    labels.push_back(200.0 + i);
  }
  for (auto _ : state) benchmark::DoNotOptimize(Backward(p, mc, images, labels));
}
BENCHMARK(BM_Backward<backward_serial>)->Name("backward/serial")->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Backward<backward>)->Name("backward/omp")->Arg(8)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
