#include <benchmark/benchmark.h>

#include "carm/drr.hpp"
#include "carm/image_io.hpp"
#include "carm/phantom.hpp"

namespace {

const carm::Phantom& phantom() {
  static const carm::Phantom p = carm::build_phantom(1, carm::Demographics{}, carm::ArmPose::arms_raised);
  return p;
}

void BM_RenderDirect(benchmark::State& state) {
  const auto& p = phantom();
  const int res = static_cast<int>(state.range(0));
  const carm::CarmPose pose{p.extent().x / 2, p.extent().y / 2, p.table_z()};
  for (auto _ : state) benchmark::DoNotOptimize(carm::render_drr(p, pose, 320, res));
  state.SetItemsProcessed(state.iterations() * res * res);
}
BENCHMARK(BM_RenderDirect)->Arg(64)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_RenderCached(benchmark::State& state) {
  const auto& p = phantom();
  const carm::DrrRenderer renderer(p);
  const int res = static_cast<int>(state.range(0));
  const carm::CarmPose pose{p.extent().x / 2, p.extent().y / 2, p.table_z()};
  for (auto _ : state) benchmark::DoNotOptimize(renderer.render(pose, 320, res));
  state.SetItemsProcessed(state.iterations() * res * res);
}
BENCHMARK(BM_RenderCached)->Arg(64)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_EncodePng16(benchmark::State& state) {
  const auto& p = phantom();
  const auto img = carm::render_drr(p, {p.extent().x / 2, p.extent().y / 2, p.table_z()}, 320, 256);
  for (auto _ : state) benchmark::DoNotOptimize(carm::encode_png16(img));
}
BENCHMARK(BM_EncodePng16)->Unit(benchmark::kMillisecond);

void BM_LineIntegral(benchmark::State& state) {
  const auto& p = phantom();
  const carm::Vec3 e = p.extent();
  const carm::Ray ray{{e.x / 2, e.y / 2, -10.0}, {0.1, 0.2, 1.0}};
  for (auto _ : state) benchmark::DoNotOptimize(carm::line_integral(p, ray));
}
BENCHMARK(BM_LineIntegral);

}  // namespace

BENCHMARK_MAIN();
