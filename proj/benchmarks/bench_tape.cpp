#include <benchmark/benchmark.h>

#include "nfa/rng.hpp"
#include "nfa/tape.hpp"

namespace {

template <typename S>
void forward_backward(benchmark::State& state) {
  using nfa::Tape;
  using nfa::Tensor;
  const std::int64_t batch = state.range(0);
  const std::int64_t width = 128;
  nfa::Rng rng(1);
  const auto x = Tensor<S>::uniform({batch, 3}, S(-1), S(1), rng);
  const auto w1 = Tensor<S>::uniform({3, width}, S(-0.5), S(0.5), rng);
  const auto w2 = Tensor<S>::uniform({width, width}, S(-0.1), S(0.1), rng);
  const auto w3 = Tensor<S>::uniform({width, 1}, S(-0.1), S(0.1), rng);
  for (auto _ : state) {
    Tape<S> t;
    auto xi = t.constant(x);
    auto a = t.sin(t.matmul(xi, t.leaf(w1)));
    auto b = t.sin(t.matmul(a, t.leaf(w2)));
    auto y = t.mean_all(t.square(t.matmul(b, t.leaf(w3))));
    t.backward(y);
    benchmark::DoNotOptimize(t.val(y).item());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}

void BM_forward_backward_f32(benchmark::State& state) { forward_backward<float>(state); }
void BM_forward_backward_f64(benchmark::State& state) { forward_backward<double>(state); }

}  // namespace

BENCHMARK(BM_forward_backward_f32)->Arg(256)->Arg(2048);
BENCHMARK(BM_forward_backward_f64)->Arg(256)->Arg(2048);

BENCHMARK_MAIN();
