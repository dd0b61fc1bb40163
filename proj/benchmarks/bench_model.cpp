#include <benchmark/benchmark.h>

#include <random>

#include "carm/model.hpp"
#include "carm/training.hpp"

namespace {

carm::ModelConfig config(int width) {
  carm::ModelConfig c;
  c.input_resolution = 128;
  c.base_width = width;
  return c;
}

struct Batch {
  carm::Tensor images, demographics;
};

Batch random_batch(int n) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Batch b{carm::Tensor({n, 128, 128}), carm::Tensor({n, carm::kDemographicFields})};
  for (std::int64_t i = 0; i < b.images.numel(); ++i) b.images[i] = u(rng);
  for (int r = 0; r < n; ++r) {
    b.demographics[r * 4 + 0] = 50;
    b.demographics[r * 4 + 2] = 1700;
    b.demographics[r * 4 + 3] = 70;
  }
  return b;
}

void BM_Inference(benchmark::State& state) {
  const auto params = carm::init_params(config(static_cast<int>(state.range(0))), carm::HeadKind::regression, 1);
  const Batch b = random_batch(32);
  for (auto _ : state) benchmark::DoNotOptimize(carm::predict(params, b.images, b.demographics));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Inference)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto params = carm::init_params(config(static_cast<int>(state.range(0))), carm::HeadKind::regression, 1);
  const Batch b = random_batch(32);
  const auto mask = carm::set_trainable(params, carm::TuneMode::full);
  carm::Adam adam(1e-3);
  carm::Tensor target({32, 3}, 0.5f);
  for (auto _ : state) {
    carm::ModelGraph graph(params, true, mask);
    const auto pass = graph.run(b.images, b.demographics);
    carm::Tensor grad;
    carm::mse_loss(pass.output, target, &grad);
    adam.step(params, graph.backward(grad));
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_TrainStep)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_Attention(benchmark::State& state) {
  const auto params = carm::init_params(carm::ModelConfig{}, carm::HeadKind::regression, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> g(0.0f, 1.0f);
  const int tokens = static_cast<int>(state.range(0));
  std::vector<carm::Real> q(128);
  for (auto& v : q) v = g(rng);
  std::vector<std::vector<carm::Real>> keys(tokens, std::vector<carm::Real>(128));
  for (auto& k : keys)
    for (auto& v : k) v = g(rng);
  for (auto _ : state) benchmark::DoNotOptimize(carm::cross_attention(params, q, keys, keys));
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(64);

}  // namespace
