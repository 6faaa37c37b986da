#include "musrec/kernels.hpp"

#define EIGEN_DONT_PARALLELIZE  // threading is done per panel here
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace musrec::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

void softmax_row(double* row, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor, 0, Eigen::OuterStride<>>;
using Map = Eigen::Map<RowMajor, 0, Eigen::OuterStride<>>;

// Attention for one head; scores holds lq*lk entries.
void attention_head(const double* q, const double* k, const double* v, double* out,
                    std::size_t lq, std::size_t lk, std::size_t dim, std::size_t offset,
                    std::size_t dh, double* scores) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Lq = static_cast<Eigen::Index>(lq), Lk = static_cast<Eigen::Index>(lk),
             Dh = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> st(static_cast<Eigen::Index>(dim));
  const ConstMap Q(q + offset, Lq, Dh, st), K(k + offset, Lk, Dh, st), V(v + offset, Lk, Dh, st);
  Map S(scores, Lq, Lk, Eigen::OuterStride<>(Lk));
  Map O(out + offset, Lq, Dh, st);
  S.noalias() = Q * K.transpose();
  S *= scale;
  for (std::size_t i = 0; i < lq; ++i) softmax_row(scores + i * lk, lk);
  O.noalias() = S * V;
}

// Output rows are split into fixed panels (independent of the thread count),
// and each panel is one Eigen product, so results do not depend on
// OMP_NUM_THREADS.
constexpr std::size_t kPanel = 16;

std::ptrdiff_t panels(std::size_t rows) { return static_cast<std::ptrdiff_t>((rows + kPanel - 1) / kPanel); }

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  const bool par = m * k * n >= kParallelWork;
  const ConstMap B(b, k, n, Eigen::OuterStride<>(n));
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t pp = 0; pp < panels(m); ++pp) {
    const std::size_t i0 = static_cast<std::size_t>(pp) * kPanel;
    const auto rows = static_cast<Eigen::Index>(std::min(kPanel, m - i0));
    const ConstMap A(a + i0 * k, rows, k, Eigen::OuterStride<>(k));
    Map C(c + i0 * n, rows, n, Eigen::OuterStride<>(n));
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  }
}

void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  const bool par = m * k * n >= kParallelWork;
  const ConstMap B(b, m, n, Eigen::OuterStride<>(n));
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t pp = 0; pp < panels(k); ++pp) {
    const std::size_t p0 = static_cast<std::size_t>(pp) * kPanel;
    const auto cols = static_cast<Eigen::Index>(std::min(kPanel, k - p0));
    const ConstMap A(a + p0, m, cols, Eigen::OuterStride<>(k));
    Map C(c + p0 * n, cols, n, Eigen::OuterStride<>(n));
    C.noalias() += A.transpose() * B;
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k, bool accumulate) {
  const bool par = m * k * n >= kParallelWork;
  const ConstMap B(b, k, n, Eigen::OuterStride<>(n));
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t pp = 0; pp < panels(m); ++pp) {
    const std::size_t i0 = static_cast<std::size_t>(pp) * kPanel;
    const auto rows = static_cast<Eigen::Index>(std::min(kPanel, m - i0));
    const ConstMap A(a + i0 * n, rows, n, Eigen::OuterStride<>(n));
    Map C(c + i0 * k, rows, k, Eigen::OuterStride<>(k));
    if (accumulate) {
      C.noalias() += A * B.transpose();
    } else {
      C.noalias() = A * B.transpose();
    }
  }
}

void attention(const double* q, const double* k, const double* v, double* out, std::size_t lq,
               std::size_t lk, std::size_t dim, std::size_t heads, double* probs) {
  const std::size_t dh = dim / heads;
  std::vector<double> scratch(probs ? 0 : heads * lq * lk);
  double* scores = probs ? probs : scratch.data();
  const bool par = heads * lq * lk * dh >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t hh = 0; hh < static_cast<std::ptrdiff_t>(heads); ++hh) {
    const auto h = static_cast<std::size_t>(hh);
    attention_head(q, k, v, out, lq, lk, dim, h * dh, dh, scores + h * lq * lk);
  }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv, std::size_t lq,
                        std::size_t lk, std::size_t dim, std::size_t heads) {
  const std::size_t dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Lq = static_cast<Eigen::Index>(lq), Lk = static_cast<Eigen::Index>(lk),
             Dh = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> st(static_cast<Eigen::Index>(dim));
  const bool par = heads * lq * lk * dh >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t hh = 0; hh < static_cast<std::ptrdiff_t>(heads); ++hh) {
    const std::size_t off = static_cast<std::size_t>(hh) * dh;
    const ConstMap Q(q + off, Lq, Dh, st), K(k + off, Lk, Dh, st), V(v + off, Lk, Dh, st);
    const ConstMap dO(dout + off, Lq, Dh, st);
    const ConstMap P(probs + static_cast<std::size_t>(hh) * lq * lk, Lq, Lk, Eigen::OuterStride<>(Lk));
    Map dQ(dq + off, Lq, Dh, st), dK(dk + off, Lk, Dh, st), dV(dv + off, Lk, Dh, st);
    dV.noalias() = P.transpose() * dO;
    // dS = P * (dP - rowsum(dP * P)) with dP = dO V^T
    RowMajor dS = dO * V.transpose();
    for (Eigen::Index i = 0; i < Lq; ++i) {
      const double rowdot = dS.row(i).dot(P.row(i));
      for (Eigen::Index j = 0; j < Lk; ++j) dS(i, j) = P(i, j) * (dS(i, j) - rowdot) * scale;
    }
    dQ.noalias() = dS * K;
    dK.noalias() = dS.transpose() * Q;
  }
}

void cqt_magnitudes(std::span<const double> signal, std::span<const CqtKernel> kernels,
                    std::size_t hop, std::size_t frames, double* out) {
  const auto len = static_cast<std::ptrdiff_t>(signal.size());
  const std::size_t bins = kernels.size();
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t ff = 0; ff < static_cast<std::ptrdiff_t>(frames); ++ff) {
    const auto center = ff * static_cast<std::ptrdiff_t>(hop);
    for (std::size_t b = 0; b < bins; ++b) {
      const auto& taps = kernels[b].taps;
      const auto n = static_cast<std::ptrdiff_t>(taps.size());
      const std::ptrdiff_t start = center - n / 2;
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -start);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n, len - start);
      double re = 0.0;
      double im = 0.0;
      for (std::ptrdiff_t j = lo; j < hi; ++j) {
        const double x = signal[static_cast<std::size_t>(start + j)];
        re += x * taps[static_cast<std::size_t>(j)].real();
        im += x * taps[static_cast<std::size_t>(j)].imag();
      }
      out[b * frames + static_cast<std::size_t>(ff)] = std::hypot(re, im);
    }
  }
}

namespace reference {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + p] * b[i * n + j];
      c[p * n + j] += s;
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[p * n + j];
      c[i * k + p] = accumulate ? c[i * k + p] + s : s;
    }
  }
}

void attention(const double* q, const double* k, const double* v, double* out, std::size_t lq,
               std::size_t lk, std::size_t dim, std::size_t heads, double* probs) {
  const std::size_t dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> w(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * dim + off + c] * k[j * dim + off + c];
        w[j] = s * scale;
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) z += std::exp(w[j] - mx);
      for (std::size_t j = 0; j < lk; ++j) {
        w[j] = std::exp(w[j] - mx) / z;
        if (probs) probs[(h * lq + i) * lk + j] = w[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < lk; ++j) s += w[j] * v[j * dim + off + c];
        out[i * dim + off + c] = s;
      }
    }
  }
}

void cqt_magnitudes(std::span<const double> signal, std::span<const CqtKernel> kernels,
                    std::size_t hop, std::size_t frames, double* out) {
  const auto len = static_cast<std::ptrdiff_t>(signal.size());
  for (std::size_t b = 0; b < kernels.size(); ++b) {
    const auto& taps = kernels[b].taps;
    const auto n = static_cast<std::ptrdiff_t>(taps.size());
    for (std::size_t f = 0; f < frames; ++f) {
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f * hop) - n / 2;
      std::complex<double> acc{0.0, 0.0};
      for (std::ptrdiff_t j = 0; j < n; ++j) {
        const std::ptrdiff_t idx = start + j;
        if (idx < 0 || idx >= len) continue;
        acc += signal[static_cast<std::size_t>(idx)] * taps[static_cast<std::size_t>(j)];
      }
      out[b * frames + f] = std::abs(acc);
    }
  }
}

}  // namespace reference
}  // namespace musrec::kernels
