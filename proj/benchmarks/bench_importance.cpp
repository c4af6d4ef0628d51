#include <random>

#include <benchmark/benchmark.h>

#include "neuronscope/engine.hpp"
#include "neuronscope/importance.hpp"

using namespace neuronscope;

namespace {

ModelConfig bench_config(int d_inter) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 64;
  c.d_inter = d_inter;
  c.n_heads = 4;
  c.d_mid = 64;
  c.vocab_size = 128;
  c.max_seq_len = 64;
  return c;
}

TokenSequence bench_input(const ModelConfig& c, int len) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> d(kReservedTokens, c.vocab_size - 1);
  TokenSequence s{{kBosId}, {}};
  while (static_cast<int>(s.size()) < len) s.ids.push_back(d(rng));
  return s;
}

void BM_Forward(benchmark::State& state) {
  const ModelConfig c = bench_config(static_cast<int>(state.range(0)));
  const Engine engine(init_random(c, 3));
  const TokenSequence input = bench_input(c, 32);
  for (auto _ : state) benchmark::DoNotOptimize(engine.forward(input));
}
BENCHMARK(BM_Forward)->Arg(256)->Arg(1024);

void BM_FfnImportanceParallel(benchmark::State& state) {
  const ModelConfig c = bench_config(static_cast<int>(state.range(0)));
  const Engine engine(init_random(c, 3));
  const LayerTrace trace = engine.forward(bench_input(c, 32));
  for (auto _ : state) benchmark::DoNotOptimize(importance_ffn_parallel(engine, trace, 0));
}
BENCHMARK(BM_FfnImportanceParallel)->Arg(256)->Arg(1024);

// One block rerun per neuron, covering the whole ffn_up family of a layer.
void BM_FfnImportanceSequential(benchmark::State& state) {
  const ModelConfig c = bench_config(static_cast<int>(state.range(0)));
  const Engine engine(init_random(c, 3));
  const LayerTrace trace = engine.forward(bench_input(c, 32));
  for (auto _ : state) {
    double total = 0.0;
    for (int i = 0; i < c.d_inter; ++i) total += importance_sequential(engine, trace, {0, Submodule::ffn_up, i});
    benchmark::DoNotOptimize(total);
  }
}
BENCHMARK(BM_FfnImportanceSequential)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_AttnImportance(benchmark::State& state) {
  const ModelConfig c = bench_config(256);
  const Engine engine(init_random(c, 3));
  const LayerTrace trace = engine.forward(bench_input(c, static_cast<int>(state.range(0))));
  const auto mode = state.range(1) == 0 ? AttnMode::exact : AttnMode::first_order;
  for (auto _ : state) benchmark::DoNotOptimize(importance_attn_parallel(engine, trace, 0, mode));
}
BENCHMARK(BM_AttnImportance)->Args({16, 0})->Args({64, 0})->Args({64, 1});

}  // namespace
BENCHMARK_MAIN();
