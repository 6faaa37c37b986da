#pragma once

// Dense compute kernels. `musrec::kernels` holds the OpenMP versions used by
// the model and the DSP code; `musrec::kernels::reference` holds plain serial
// loops with the textbook summation order. The reference versions exist for
// tests and for bench/ and are never called on the hot path.
//
// Parallel kernels partition work over output rows (or heads, or frames)
// only, so every output element is produced by the same instruction
// sequence regardless of the thread count. Results are therefore
// bitwise-reproducible across OMP_NUM_THREADS settings.

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace musrec::kernels {

// C[m x n] = A[m x k] * B[k x n]   (C += ... when accumulate)
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false);

// C[k x n] += A[m x k]^T * B[m x n]   (weight gradients)
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);

// C[m x k] = A[m x n] * B[k x n]^T   (C += ... when accumulate; input gradients)
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k, bool accumulate = false);

// Multi-head scaled dot-product attention. q is [lq x dim], k and v are
// [lk x dim]; heads are contiguous column slices of width dim/heads.
// out is [lq x dim]. When probs is non-null it receives heads*lq*lk
// softmax weights (head-major).
void attention(const double* q, const double* k, const double* v, double* out, std::size_t lq,
               std::size_t lk, std::size_t dim, std::size_t heads, double* probs = nullptr);

// Backward pass of attention given the saved probabilities.
// Writes dq and accumulates nothing: dq, dk, dv are overwritten.
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv, std::size_t lq,
                        std::size_t lk, std::size_t dim, std::size_t heads);

// One matched-filter kernel of the constant-Q transform.
struct CqtKernel {
  std::vector<std::complex<double>> taps;  // centered on the frame position
};

// |<x, kernel_b>| for every bin b and every frame f (frame f centered at
// sample f*hop, zero outside the signal). out is [bins x frames] row-major.
void cqt_magnitudes(std::span<const double> signal, std::span<const CqtKernel> kernels,
                    std::size_t hop, std::size_t frames, double* out);

namespace reference {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false);
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k, bool accumulate = false);
void attention(const double* q, const double* k, const double* v, double* out, std::size_t lq,
               std::size_t lk, std::size_t dim, std::size_t heads, double* probs = nullptr);
void cqt_magnitudes(std::span<const double> signal, std::span<const CqtKernel> kernels,
                    std::size_t hop, std::size_t frames, double* out);

}  // namespace reference

}  // namespace musrec::kernels
