#include <benchmark/benchmark.h>

#include <random>

#include "clmae/training.hpp"

using namespace clmae;

namespace {

Tensor<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(r * c);
  for (auto& x : v) x = d(rng);
  return Tensor<float>::from_vector({r, c}, std::move(v), true);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(544);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) {
    sum(matmul(a, b)).backward();
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(256);

// One encoder block over a batch of 32 images of 17 tokens.
void BM_VitBlock(benchmark::State& state) {
  Rng rng(0);
  const auto block = make_vit_block<float>(64, 4, 4, rng);
  const auto x = random_matrix(32 * 17, 64, 3);
  const auto groups = uniform_groups(32, 17);
  const bool train = state.range(0) != 0;
  for (auto _ : state) {
    if (train) {
      sum(vit_block(x, block, groups)).backward();
    } else {
      NoGradGuard ng;
      benchmark::DoNotOptimize(vit_block(x, block, groups).data().data());
    }
  }
}
BENCHMARK(BM_VitBlock)->Arg(0)->Arg(1);

void BM_TrainIteration(benchmark::State& state) {
  const auto mode = state.range(0) ? TrainMode::curriculum : TrainMode::baseline;
  SyntheticSpec spec;
  spec.per_class = 10;
  const Dataset data = gen_synthetic(spec);
  TrainConfig c;
  auto s = init_state<float>(c, data.count(), mode);
  for (auto _ : state) {
    if (s.step > c.steps) s.step = 0;
    benchmark::DoNotOptimize(train_iteration(s, data, c).loss_mae);
  }
}
BENCHMARK(BM_TrainIteration)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
