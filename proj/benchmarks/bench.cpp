#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "tbloc/anchors.hpp"
#include "tbloc/dataio.hpp"
#include "tbloc/eval.hpp"
#include "tbloc/network.hpp"
#include "tbloc/preprocess.hpp"
#include "tbloc/rng.hpp"
#include "tbloc/tensor.hpp"
#include "tbloc/trainer.hpp"

using namespace tbloc;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = false) {
  auto rng = make_rng(seed, 0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

void BM_Conv2dForward(benchmark::State& state) {
  const std::size_t c = state.range(0), size = state.range(1);
  const Tensor x = random_tensor({1, c, size, size}, 1), w = random_tensor({c, c, 3, 3}, 2), b = random_tensor({c}, 3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * c * 9 * size * size));
}
BENCHMARK(BM_Conv2dForward)->Args({16, 64})->Args({32, 32})->Args({64, 16});

void BM_Conv2dBackward(benchmark::State& state) {
  const std::size_t c = state.range(0), size = state.range(1);
  const Tensor x = random_tensor({1, c, size, size}, 1, true), w = random_tensor({c, c, 3, 3}, 2, true);
  const Tensor b = random_tensor({c}, 3, true);
  for (auto _ : state) {
    Tensor y = sum(conv2d(x, w, b));
    y.backward();
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({16, 64})->Args({32, 32});

void BM_DetectorForward(benchmark::State& state) {
  const std::size_t size = state.range(0);
  const DetectorModel model = build_model(tiny_model_config(size), 1);
  const Tensor image = random_tensor({1, 1, size, size}, 4);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(forward_detector(model, image));
}
BENCHMARK(BM_DetectorForward)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Phase1Step(benchmark::State& state) {
  SynthConfig sc;
  sc.n_tb = 1;
  sc.n_healthy = 0;
  sc.image_size = 128;
  const SynthSample s = synthesize_sample(sc, 0);
  PreprocessResult r = preprocess_record(s.record, s.image, 128);
  const Sample sample{s.record.id, s.record.label, std::move(r.image), std::move(r.boxes)};
  TrainConfig tc;
  tc.model = tiny_model_config(128);
  DetectorModel model = build_model(tc.model, 1);
  Trainer trainer(model, tc);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.phase1_step({&sample}));
}
BENCHMARK(BM_Phase1Step)->Unit(benchmark::kMillisecond);

void BM_MatchAnchors(benchmark::State& state) {
  const AnchorSet anchors = generate_anchors(256);
  const std::vector<Box> gts{{20, 30, 80, 90}, {120, 40, 140, 70}, {60, 150, 200, 230}};
  for (auto _ : state) benchmark::DoNotOptimize(match_anchors(anchors, gts));
}
BENCHMARK(BM_MatchAnchors);

void BM_PreprocessRecord(benchmark::State& state) {
  SynthConfig sc;
  const SynthSample s = synthesize_sample(sc, 0);
  for (auto _ : state) benchmark::DoNotOptimize(preprocess_record(s.record, s.image, 128));
}
BENCHMARK(BM_PreprocessRecord);

void BM_AveragePrecision(benchmark::State& state) {
  auto rng = make_rng(5, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ScoredFlag> flags(state.range(0));
  for (auto& f : flags) f = {u(rng), u(rng) < 0.5};
  for (auto _ : state) benchmark::DoNotOptimize(average_precision(pr_curve(flags, flags.size())));
}
BENCHMARK(BM_AveragePrecision)->Arg(1000)->Arg(100000);

}  // namespace

BENCHMARK_MAIN();
