// Serial reference kernels against their OpenMP counterparts on the nominal generator.

#include <algorithm>
#include <vector>

#include <benchmark/benchmark.h>

#include "metastab/ctmc.hpp"
#include "metastab/kernels.hpp"
#include "metastab/model.hpp"

namespace {

using namespace metastab;

struct Fixture {
  CtmcModel m;
  SparseMatrix at;
  double rate = 0.0;
  std::vector<double> x, y;

  explicit Fixture(int queue_bound)
      : m(compile(make_program("bench", {{"s1", 10.0, 1, queue_bound, 20, std::nullopt}},
                               {{"s1", 9.5, 9.0, 3}}))),
        at(m.q.rates.transpose()),
        x(m.size(), 1.0 / static_cast<double>(m.size())),
        y(m.size()) {
    rate = *std::max_element(m.q.exit.begin(), m.q.exit.end()) * 1.02;
  }
};

Fixture& fixture(int n) {
  static Fixture small(100), large(2000);
  return n <= 100 ? small : large;
}

template <kernels::Exec E>
void BM_generator_apply(benchmark::State& state) {
  Fixture& f = fixture(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    kernels::generator_apply(E, f.m.q, f.x, f.y);
    benchmark::DoNotOptimize(f.y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(f.m.q.rates.nnz()));
}

template <kernels::Exec E>
void BM_uniformized_step(benchmark::State& state) {
  Fixture& f = fixture(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    kernels::uniformized_step_block(E, f.at, f.m.q.exit, f.rate, 1, f.x, f.y);
    benchmark::DoNotOptimize(f.y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(f.m.q.rates.nnz()));
}

template <kernels::Exec E>
void BM_dot(benchmark::State& state) {
  Fixture& f = fixture(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::dot(E, f.x, f.x));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(f.x.size()));
}

}  // namespace

BENCHMARK(BM_generator_apply<metastab::kernels::Exec::Serial>)->Arg(100)->Arg(2000);
BENCHMARK(BM_generator_apply<metastab::kernels::Exec::Parallel>)->Arg(100)->Arg(2000);
BENCHMARK(BM_uniformized_step<metastab::kernels::Exec::Serial>)->Arg(100)->Arg(2000);
BENCHMARK(BM_uniformized_step<metastab::kernels::Exec::Parallel>)->Arg(100)->Arg(2000);
BENCHMARK(BM_dot<metastab::kernels::Exec::Serial>)->Arg(100)->Arg(2000);
BENCHMARK(BM_dot<metastab::kernels::Exec::Parallel>)->Arg(100)->Arg(2000);

BENCHMARK_MAIN();
