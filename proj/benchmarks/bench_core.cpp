#include <benchmark/benchmark.h>

#include <vector>

#include "egrot/eval.hpp"
#include "egrot/model.hpp"
#include "egrot/ops.hpp"
#include "egrot/so3.hpp"
#include "egrot/synth.hpp"
#include "egrot/training.hpp"

using namespace egrot;

namespace {

void BM_GeodesicAngle(benchmark::State& state) {
  Rng rng(1);
  const auto a = so3::random_rotation(rng), b = so3::random_rotation(rng);
  for (auto _ : state) benchmark::DoNotOptimize(so3::geodesic_angle(a, b));
}
BENCHMARK(BM_GeodesicAngle);

void BM_FpsSelect(benchmark::State& state) {
  Rng rng(2);
  std::vector<so3::RotationMatrix> pool(96);
  for (auto& r : pool) r = so3::random_rotation(rng);
  for (auto _ : state) benchmark::DoNotOptimize(so3::fps_select(pool, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_FpsSelect)->Arg(16)->Arg(64);

void BM_Render(benchmark::State& state) {
  const auto obj = synth::generate_object(3);
  Rng rng(3);
  const auto r = so3::random_rotation(rng);
  const int crop = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(synth::render(obj, r, crop, synth::BackgroundSpec::solid({0, 0, 0})));
}
BENCHMARK(BM_Render)->Arg(32)->Arg(64);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  ag::Tensor<float> a({n, n}, std::vector<float>(n * n, 0.5f)), b({n, n}, std::vector<float>(n * n, 0.25f));
  ag::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(ag::matmul(a, b));
}
BENCHMARK(BM_Matmul)->Arg(128)->Arg(512);

// Per-query prediction against onboarded references.
void BM_PredictOneQuery(benchmark::State& state) {
  const model::Model<float> m(model::ModelConfig{}, 4);
  const auto obj = synth::generate_object(4);
  Rng rng(4);
  std::vector<synth::Image> refs;
  std::vector<so3::RotationMatrix> rots;
  for (int i = 0; i < state.range(0); ++i) {
    rots.push_back(so3::random_rotation(rng));
    refs.push_back(synth::render(obj, rots.back(), 32, synth::BackgroundSpec::solid({0, 0, 0})));
  }
  std::vector<const synth::Image*> ptrs;
  for (const auto& r : refs) ptrs.push_back(&r);
  const auto query = synth::render(obj, so3::random_rotation(rng), 32, synth::BackgroundSpec::solid({0, 0, 0}));
  const std::vector<const synth::Image*> q{&query};
  ag::NoGradGuard no_grad;
  const auto cache = m.onboard(ptrs, rots, false);
  for (auto _ : state) benchmark::DoNotOptimize(m.predict_rot6d_onboarded(cache, q));
}
BENCHMARK(BM_PredictOneQuery)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  EpisodeSpec spec;
  spec.n_ref_pool = 24;
  spec.n_query_pool = 8;
  const auto ds = generate_dataset(6, spec, 5);
  model::Model<float> m(model::ModelConfig{}, 5);
  ag::OptimizerState<float> opt;
  TrainConfig cfg;
  cfg.objects_per_batch = 5;
  cfg.n_ref = 16;
  cfg.n_query = 8;
  const auto latents = train::encode_dataset(m, ds);
  train::StepContext<float> ctx{&m, &opt, true, &latents, &ds};
  std::uint64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(train::train_step(train::build_batch(ds, cfg, 1, ++step), ctx));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
