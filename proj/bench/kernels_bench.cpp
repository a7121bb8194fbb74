#include <benchmark/benchmark.h>

#include <vector>

#include "dsmd/embedding.hpp"
#include "dsmd/kernels.hpp"
#include "dsmd/rng.hpp"

namespace {

using dsmd::EmbeddingMatrix;
namespace k = dsmd::kernels;

EmbeddingMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  dsmd::SeededRng rng(seed);
  EmbeddingMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.gaussian();
  return m;
}

template <auto Fn>
void bm_matmul_nt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, 32, 1), b = random_matrix(5 * n, 32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * 5 * n));
}

template <auto Fn>
void bm_cosine(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, 32, 3), b = random_matrix(5 * n, 32, 4);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * 5 * n));
}

template <auto Fn>
void bm_best_gt_rank(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto sim = k::serial::cosine_matrix(random_matrix(n, 32, 5), random_matrix(5 * n, 32, 6));
  std::vector<std::vector<std::size_t>> gt(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 5; ++c) gt[i].push_back(5 * i + c);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(sim, gt));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * 5 * n));
}

}  // namespace

BENCHMARK(bm_matmul_nt<k::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(100)->Arg(500);
BENCHMARK(bm_matmul_nt<k::matmul_nt>)->Name("matmul_nt/parallel")->Arg(100)->Arg(500);
BENCHMARK(bm_cosine<k::serial::cosine_matrix>)->Name("cosine_matrix/serial")->Arg(100)->Arg(500);
BENCHMARK(bm_cosine<k::cosine_matrix>)->Name("cosine_matrix/parallel")->Arg(100)->Arg(500);
BENCHMARK(bm_best_gt_rank<k::serial::best_gt_rank>)->Name("best_gt_rank/serial")->Arg(100)->Arg(500);
BENCHMARK(bm_best_gt_rank<k::best_gt_rank>)->Name("best_gt_rank/parallel")->Arg(100)->Arg(500);

BENCHMARK_MAIN();
