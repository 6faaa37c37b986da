#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <vector>

#include "musrec/dsp.hpp"
#include "musrec/kernels.hpp"
#include "musrec/velocity_net.hpp"

using namespace musrec;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// sizes seen in the model: 66 tokens x 64 wide, 64 -> 256 MLP
template <bool Ref>
void BM_gemm(benchmark::State& st) {
  const auto m = std::size_t(st.range(0)), k = std::size_t(st.range(1)), n = std::size_t(st.range(2));
  const auto a = noise(m * k, 1), b = noise(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : st) {
    if constexpr (Ref)
      kernels::reference::gemm(a.data(), b.data(), c.data(), m, k, n);
    else
      kernels::gemm(a.data(), b.data(), c.data(), m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * std::int64_t(2 * m * k * n));
}
BENCHMARK(BM_gemm<true>)->Name("gemm/reference")->Args({66, 64, 64})->Args({66, 64, 256})->Args({256, 256, 256});
BENCHMARK(BM_gemm<false>)->Name("gemm/omp")->Args({66, 64, 64})->Args({66, 64, 256})->Args({256, 256, 256});

template <bool Ref>
void BM_attention(benchmark::State& st) {
  const auto l = std::size_t(st.range(0)), d = std::size_t(64), h = std::size_t(4);
  const auto q = noise(l * d, 3), k = noise(l * d, 4), v = noise(l * d, 5);
  std::vector<double> out(l * d);
  for (auto _ : st) {
    if constexpr (Ref)
      kernels::reference::attention(q.data(), k.data(), v.data(), out.data(), l, l, d, h);
    else
      kernels::attention(q.data(), k.data(), v.data(), out.data(), l, l, d, h);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_attention<true>)->Name("attention/reference")->Arg(66)->Arg(256);
BENCHMARK(BM_attention<false>)->Name("attention/omp")->Arg(66)->Arg(256);

Signal clip() {
  Signal s;
  s.samples.resize(64000);
  for (std::size_t i = 0; i < s.samples.size(); ++i) s.samples[i] = 0.5 * std::sin(2 * M_PI * 440.0 * double(i) / 16000.0);
  return s;
}

void BM_cqt_reference(benchmark::State& st) {
  const Signal s = clip();
  for (auto _ : st) benchmark::DoNotOptimize(cqt_reference(s));
}
void BM_cqt_omp(benchmark::State& st) {
  const Signal s = clip();
  for (auto _ : st) benchmark::DoNotOptimize(cqt(s));
}
BENCHMARK(BM_cqt_reference)->Name("cqt/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_cqt_omp)->Name("cqt/omp")->Unit(benchmark::kMillisecond);

void BM_forward(benchmark::State& st) {
  NetConfig cfg;
  const VelocityNet net(cfg, init_params(cfg));
  const Latent z(64, 64, 0.1);
  for (auto _ : st) benchmark::DoNotOptimize(net.forward(z, 0.5, Conditioning::labels(1, 2)));
}
BENCHMARK(BM_forward)->Name("net/forward")->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
