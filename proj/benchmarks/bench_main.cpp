// Microbenchmarks at the default experiment sizes.

#include "slog/evalreport.hpp"
#include "slog/models.hpp"
#include "slog/slogtrain.hpp"
#include "slog/synthworld.hpp"
#include "slog/textmetrics.hpp"

#include <benchmark/benchmark.h>

#include <numeric>

using namespace slog;

namespace {

struct Fixture {
  world::World world = world::make_world(world::WorldConfig{});
  std::vector<world::Instance> data = world::sample_instances(world, 64, 1);
  models::Generator gen = models::init_generator(models::generator_config_for(world, 16), 2);
  models::Surrogate surr = models::init_surrogate(models::surrogate_config_for(world, gen.config), 3,
                                                  &gen.params.at("gen/embed"));

  [[nodiscard]] train::CaptionBatch batch(std::size_t n) const {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return train::caption_batch(data, idx);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_CaptionForward(benchmark::State& state) {
  const auto& f = fixture();
  const auto b = f.batch(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    nn::Tape tape(false);
    nn::Bound p(tape, f.gen.params, false);
    benchmark::DoNotOptimize(models::caption_nll(tape, p, f.gen.config, b.features, b.findings).scalar());
  }
}
BENCHMARK(BM_CaptionForward)->Arg(8)->Arg(32);

void BM_CaptionForwardBackward(benchmark::State& state) {
  const auto& f = fixture();
  const auto b = f.batch(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    nn::Tape tape(true);
    nn::Bound p(tape, f.gen.params, true);
    auto loss = models::caption_nll(tape, p, f.gen.config, b.features, b.findings);
    tape.backward(loss);
    benchmark::DoNotOptimize(p.grads(tape));
  }
}
BENCHMARK(BM_CaptionForwardBackward)->Arg(8)->Arg(32);

void BM_AugmentedLossWithGrads(benchmark::State& state) {
  const auto& f = fixture();
  const auto b = f.batch(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    nn::ParamTree grads;
    benchmark::DoNotOptimize(train::augmented_loss(f.gen, f.surr, b, b.features, 10.0, &grads));
  }
}
BENCHMARK(BM_AugmentedLossWithGrads)->Arg(8)->Arg(32);

void BM_DecodeGreedy(benchmark::State& state) {
  const auto& f = fixture();
  const auto b = f.batch(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(models::decode_greedy(f.gen, b.features));
}
BENCHMARK(BM_DecodeGreedy)->Arg(1)->Arg(64);

void BM_CorpusBleu(benchmark::State& state) {
  const auto& f = fixture();
  const auto decoded = models::decode_greedy(f.gen, f.batch(64).features);
  std::vector<text::TokenSequence> cand, ref;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    cand.push_back(decoded[i].tokens);
    ref.push_back(f.data[i].findings);
  }
  for (auto _ : state) benchmark::DoNotOptimize(text::corpus_bleu(cand, ref, f.world.vocab));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(cand.size()));
}
BENCHMARK(BM_CorpusBleu);

}  // namespace
BENCHMARK_MAIN();
