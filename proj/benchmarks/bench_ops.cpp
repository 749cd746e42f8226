// Microbenchmarks for the tensor kernels and the model-level forward/backward
// passes. Run the binary directly; it reports wall time plus derived counters
// (GFLOP/s for matmul, items/s elsewhere).

#include <benchmark/benchmark.h>

#include <vector>

#include "bench_util.hpp"
#include "fuselm/ops.hpp"
#include "fuselm/tensor.hpp"

namespace {

using namespace fuselm;

Tensor random_matrix(int64_t rows, int64_t cols, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({rows, cols}, rng, 1.0);
}

void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  NoGradGuard ng;
  Tensor a = random_matrix(n, n, 1);
  Tensor b = random_matrix(n, n, 2);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.counters["gflops"] = benchmark::Counter(
      static_cast<double>(state.iterations()) * 2.0 * static_cast<double>(n) *
          static_cast<double>(n) * static_cast<double>(n) * 1e-9,
      benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

void BM_SoftmaxRows(benchmark::State& state) {
  const int64_t rows = state.range(0);
  NoGradGuard ng;
  Tensor x = random_matrix(rows, 98, 3);
  for (auto _ : state) {
    Tensor y = softmax(x);
    benchmark::DoNotOptimize(y.values().data());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_SoftmaxRows)->Arg(64)->Arg(256);

void BM_CrossEntropy(benchmark::State& state) {
  const int64_t rows = state.range(0);
  const int64_t vocab = 98;
  NoGradGuard ng;
  Tensor logits = random_matrix(rows, vocab, 4);
  std::vector<int> targets(static_cast<size_t>(rows));
  std::vector<uint8_t> mask(static_cast<size_t>(rows), 1);
  Rng rng(5);
  for (int& t : targets) t = static_cast<int>(rng.next_u64() % vocab);
  for (auto _ : state) {
    Tensor loss = cross_entropy(logits, targets, mask);
    benchmark::DoNotOptimize(loss.scalar_value());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_CrossEntropy)->Arg(64)->Arg(256);

void BM_CausalAttention(benchmark::State& state) {
  const int64_t t = state.range(0);
  const int64_t d = 128;
  NoGradGuard ng;
  Tensor q = random_matrix(t, d, 6);
  Tensor k = random_matrix(t, d, 7);
  Tensor v = random_matrix(t, d, 8);
  for (auto _ : state) {
    Tensor y = causal_self_attention(q, k, v, 4);
    benchmark::DoNotOptimize(y.values().data());
  }
  state.SetItemsProcessed(state.iterations() * t);
}
BENCHMARK(BM_CausalAttention)->Arg(64)->Arg(128)->Arg(256);

// One specialist, full forward at the default width. Items = positions.
void BM_SpecialistForward(benchmark::State& state) {
  const int64_t t = state.range(0);
  FusedModel model = bench::make_model(1, bench::model_config());
  std::vector<int> tokens(static_cast<size_t>(t));
  Rng rng(9);
  for (int& id : tokens)
    id = static_cast<int>(rng.next_u64() %
                          static_cast<uint64_t>(model.config().vocab_size));
  NoGradGuard ng;
  for (auto _ : state) {
    SpecialistOutput out = model.specialists[0].forward(tokens);
    benchmark::DoNotOptimize(out.logits.values().data());
  }
  state.SetItemsProcessed(state.iterations() * t);
}
BENCHMARK(BM_SpecialistForward)->Arg(64)->Arg(128);

// Teacher-forced fused pass as the committee grows: the cost is expected to
// scale close to linearly with the specialist count.
void BM_FusedForwardBySpecialists(benchmark::State& state) {
  const int s_count = static_cast<int>(state.range(0));
  FusedModel model = bench::make_model(s_count, bench::model_config());
  const Tokenizer tok;
  const TrainingExample ex{Domain::kCode, "sort a list",
                           "xs = sorted(values)\nprint(xs)"};
  const WrappedExample wrapped =
      wrap_example(ex, model.templates(), tok, model.config().max_seq_len);
  for (auto _ : state) {
    FusedForward out = fused_forward(model, wrapped, FuseMode::kInference);
    benchmark::DoNotOptimize(out.fused_logits.values().data());
  }
  state.SetItemsProcessed(state.iterations() * wrapped.response_len);
}
BENCHMARK(BM_FusedForwardBySpecialists)->Arg(1)->Arg(2)->Arg(3);

// Full joint training step cost (forward + backward, no optimizer): the
// dominant term in stage-two wall time.
void BM_FusedForwardBackward(benchmark::State& state) {
  FusedModel model = bench::make_model(3, bench::model_config());
  ParamRefs params = model.named_params();
  for (NamedParam& p : params) p.tensor.set_requires_grad(true);
  const Tokenizer tok;
  const TrainingExample ex{Domain::kMath, "12*11+5", "137."};
  const WrappedExample wrapped =
      wrap_example(ex, model.templates(), tok, model.config().max_seq_len);
  for (auto _ : state) {
    Tensor loss = fused_response_loss(model, wrapped, FuseMode::kTracked);
    backward(loss);
    benchmark::DoNotOptimize(loss.scalar_value());
    for (NamedParam& p : params) p.tensor.zero_grad();
  }
}
BENCHMARK(BM_FusedForwardBackward);

}  // namespace
