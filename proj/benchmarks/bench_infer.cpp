// Decoding-path benchmarks: tokens per second for the cached engine
// orchestration as the committee grows, against the recompute-everything
// reference decoder and a lone specialist session.

#include <benchmark/benchmark.h>

#include <string_view>

#include "bench_util.hpp"
#include "fuselm/infer.hpp"

namespace {

using namespace fuselm;

constexpr std::string_view kPrompt = "compute 12*34 then explain";
constexpr int kNewTokens = 16;

GenerationConfig greedy_budget() {
  GenerationConfig cfg;
  cfg.max_new_tokens = kNewTokens;
  return cfg;
}

// KV-cached lockstep decoding; the per-token cost should grow roughly
// linearly with the number of engines.
void BM_CachedDecode(benchmark::State& state) {
  const int s_count = static_cast<int>(state.range(0));
  FusedModel model = bench::make_model(s_count, bench::model_config());
  const Tokenizer tok;
  const GenerationConfig cfg = greedy_budget();
  int64_t tokens = 0;
  for (auto _ : state) {
    GenerationResult out = generate_fused_cached(model, kPrompt, cfg, tok);
    tokens += static_cast<int64_t>(out.token_ids.size());
    benchmark::DoNotOptimize(out.token_ids.data());
  }
  state.SetItemsProcessed(tokens);
}
BENCHMARK(BM_CachedDecode)->Arg(1)->Arg(2)->Arg(3);

// Reference decoder: re-runs every specialist over its full context each
// step, so cost per token is quadratic in the emitted length.
void BM_MonolithicDecode(benchmark::State& state) {
  FusedModel model = bench::make_model(3, bench::model_config());
  const Tokenizer tok;
  const GenerationConfig cfg = greedy_budget();
  int64_t tokens = 0;
  for (auto _ : state) {
    GenerationResult out = generate_fused(model, kPrompt, cfg, tok);
    tokens += static_cast<int64_t>(out.token_ids.size());
    benchmark::DoNotOptimize(out.token_ids.data());
  }
  state.SetItemsProcessed(tokens);
}
BENCHMARK(BM_MonolithicDecode);

// Lone specialist on the recompute-everything reference path (no KV cache):
// the single-model analogue of BM_MonolithicDecode.
void BM_SpecialistDecode(benchmark::State& state) {
  FusedModel model = bench::make_model(1, bench::model_config());
  const Tokenizer tok;
  const GenerationConfig cfg = greedy_budget();
  int64_t tokens = 0;
  for (auto _ : state) {
    GenerationResult out =
        generate_specialist(model.specialists[0], kPrompt, cfg, tok);
    tokens += static_cast<int64_t>(out.token_ids.size());
    benchmark::DoNotOptimize(out.token_ids.data());
  }
  state.SetItemsProcessed(tokens);
}
BENCHMARK(BM_SpecialistDecode);

// Raw engine step/resume latency once the prompt is absorbed.
void BM_EngineStep(benchmark::State& state) {
  FusedModel model = bench::make_model(1, bench::model_config());
  const Tokenizer tok;
  int64_t steps = 0;
  for (auto _ : state) {
    state.PauseTiming();
    EngineHandle engine(model.specialists[0], kPrompt, tok);
    engine.step();     // absorbs the templated prompt
    engine.resume(5);  // arbitrary in-vocabulary token
    state.ResumeTiming();
    for (int i = 0; i < kNewTokens; ++i) {
      EngineHandle::StepOutput out = engine.step();
      benchmark::DoNotOptimize(out.logits.data());
      engine.resume(5);
    }
    steps += kNewTokens;
  }
  state.SetItemsProcessed(steps);
}
BENCHMARK(BM_EngineStep);

}  // namespace

// The system libbenchmark_main.a ships LTO bytecode from a mismatched
// compiler; expanding the macro here sidesteps linking it.
BENCHMARK_MAIN();
