#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "musrec/kernels.hpp"
#include "test_util.hpp"

using namespace musrec;
namespace k = musrec::kernels;

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

struct Threads {
  int saved = omp_get_max_threads();
  explicit Threads(int n) { omp_set_num_threads(n); }
  ~Threads() { omp_set_num_threads(saved); }
};

}  // namespace

TEST_CASE("gemm variants agree with the serial loops") {
  // odd sizes straddle the 16-row panels
  const std::size_t m = 37, kk = 19, n = 23;
  const auto a = randv(m * kk, 1), b = randv(kk * n, 2);
  std::vector<double> c(m * n), r(m * n);
  k::gemm(a.data(), b.data(), c.data(), m, kk, n);
  k::reference::gemm(a.data(), b.data(), r.data(), m, kk, n);
  CHECK(max_diff(c, r) < 1e-12);
  k::gemm(a.data(), b.data(), c.data(), m, kk, n, true);
  k::reference::gemm(a.data(), b.data(), r.data(), m, kk, n, true);
  CHECK(max_diff(c, r) < 1e-12);

  const auto g = randv(m * n, 3);
  std::vector<double> w(kk * n, 1.0), wr(kk * n, 1.0);
  k::gemm_tn_acc(a.data(), g.data(), w.data(), m, kk, n);
  k::reference::gemm_tn_acc(a.data(), g.data(), wr.data(), m, kk, n);
  CHECK(max_diff(w, wr) < 1e-12);

  std::vector<double> x(m * kk), xr(m * kk);
  k::gemm_nt(g.data(), b.data(), x.data(), m, n, kk);
  k::reference::gemm_nt(g.data(), b.data(), xr.data(), m, n, kk);
  CHECK(max_diff(x, xr) < 1e-12);
}

TEST_CASE("gemm by hand on a 2x2 case") {
  const std::vector<double> a{1, 2, 3, 4}, b{5, 6, 7, 8};
  std::vector<double> c(4);
  k::gemm(a.data(), b.data(), c.data(), 2, 2, 2);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("attention matches the reference and rows of probs sum to one") {
  const std::size_t lq = 20, lk = 27, dim = 16, heads = 4;
  const auto q = randv(lq * dim, 4), kv = randv(lk * dim, 5), v = randv(lk * dim, 6);
  std::vector<double> o(lq * dim), orf(lq * dim), p(heads * lq * lk), pr(heads * lq * lk);
  k::attention(q.data(), kv.data(), v.data(), o.data(), lq, lk, dim, heads, p.data());
  k::reference::attention(q.data(), kv.data(), v.data(), orf.data(), lq, lk, dim, heads, pr.data());
  CHECK(max_diff(o, orf) < 1e-12);
  CHECK(max_diff(p, pr) < 1e-14);
  for (std::size_t r = 0; r < heads * lq; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < lk; ++j) s += p[r * lk + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-13));
  }
}

TEST_CASE("attention backward agrees with central differences") {
  const std::size_t lq = 5, lk = 6, dim = 8, heads = 2;
  auto q = randv(lq * dim, 7), kv = randv(lk * dim, 8), v = randv(lk * dim, 9);
  const auto w = randv(lq * dim, 10);
  auto loss = [&] {
    std::vector<double> o(lq * dim);
    k::reference::attention(q.data(), kv.data(), v.data(), o.data(), lq, lk, dim, heads);
    double s = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) s += w[i] * o[i];
    return s;
  };
  std::vector<double> o(lq * dim), p(heads * lq * lk), dq(q.size()), dk(kv.size()), dv(v.size());
  k::attention(q.data(), kv.data(), v.data(), o.data(), lq, lk, dim, heads, p.data());
  k::attention_backward(q.data(), kv.data(), v.data(), p.data(), w.data(), dq.data(), dk.data(), dv.data(), lq,
                        lk, dim, heads);
  const double eps = 1e-6;
  auto check = [&](std::vector<double>& x, const std::vector<double>& grad) {
    for (std::size_t i = 0; i < x.size(); i += 3) {
      const double keep = x[i];
      x[i] = keep + eps;
      const double up = loss();
      x[i] = keep - eps;
      const double dn = loss();
      x[i] = keep;
      CHECK(grad[i] == doctest::Approx((up - dn) / (2 * eps)).epsilon(1e-6));
    }
  };
  check(q, dq);
  check(kv, dk);
  check(v, dv);
}

TEST_CASE("parallel kernels are bitwise identical across thread counts") {
  const std::size_t m = 64, kk = 64, n = 192;
  const auto a = randv(m * kk, 11), b = randv(kk * n, 12);
  const std::size_t lq = 64, dim = 64, heads = 4;
  const auto q = randv(lq * dim, 13), kv = randv(lq * dim, 14), v = randv(lq * dim, 15);
  auto run = [&](int threads) {
    Threads guard(threads);
    std::vector<double> c(m * n), t(kk * n), x(m * kk), o(lq * dim), p(heads * lq * lq);
    k::gemm(a.data(), b.data(), c.data(), m, kk, n);
    k::gemm_tn_acc(a.data(), c.data(), t.data(), m, kk, n);
    k::gemm_nt(c.data(), b.data(), x.data(), m, n, kk);
    k::attention(q.data(), kv.data(), v.data(), o.data(), lq, lq, dim, heads, p.data());
    c.insert(c.end(), t.begin(), t.end());
    c.insert(c.end(), x.begin(), x.end());
    c.insert(c.end(), o.begin(), o.end());
    c.insert(c.end(), p.begin(), p.end());
    return c;
  };
  const auto one = run(1);
  CHECK(same_bits(one, run(2)));
  CHECK(same_bits(one, run(3)));
}

TEST_CASE("cqt magnitudes match the serial reference") {
  const auto sig = randv(4000, 16);
  std::vector<k::CqtKernel> ks(3);
  for (std::size_t b = 0; b < ks.size(); ++b) {
    const std::size_t len = 101 + 50 * b;
    for (std::size_t i = 0; i < len; ++i)
      ks[b].taps.push_back(std::polar(1.0 / double(len), 0.3 * double(i * (b + 1))));
  }
  const std::size_t hop = 128, frames = 4000 / hop + 1;
  std::vector<double> o(ks.size() * frames), r(ks.size() * frames);
  k::cqt_magnitudes(sig, ks, hop, frames, o.data());
  k::reference::cqt_magnitudes(sig, ks, hop, frames, r.data());
  CHECK(max_diff(o, r) < 1e-13);
}

TEST_CASE("attention with one key returns V; two tokens by hand") {
  const auto q = randv(3 * 4, 20), kv = randv(4, 21), v = randv(4, 22);
  std::vector<double> o(12);
  k::attention(q.data(), kv.data(), v.data(), o.data(), 3, 1, 4, 2);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(o[r * 4 + c] == doctest::Approx(v[c]).epsilon(1e-15));

  // one head of width 2, one query, two keys
  const std::vector<double> q1{0.3, -1.2}, k2{1.0, 0.5, -0.4, 2.0}, v2{1.5, -2.0, 0.25, 3.0};
  std::vector<double> o2(2);
  k::attention(q1.data(), k2.data(), v2.data(), o2.data(), 1, 2, 2, 1);
  const double s0 = (0.3 * 1.0 - 1.2 * 0.5) / std::sqrt(2.0), s1 = (0.3 * -0.4 - 1.2 * 2.0) / std::sqrt(2.0);
  const double p0 = std::exp(s0) / (std::exp(s0) + std::exp(s1)), p1 = 1.0 - p0;
  CHECK(std::abs(o2[0] - (p0 * 1.5 + p1 * 0.25)) <= 1e-12);
  CHECK(std::abs(o2[1] - (p0 * -2.0 + p1 * 3.0)) <= 1e-12);
}
