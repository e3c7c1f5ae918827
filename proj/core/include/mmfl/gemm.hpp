#pragma once

#include <cstdint>

namespace mmfl {

// Accumulating row-major GEMM kernels (C += A * B). Loop orders are chosen so
// the inner loop runs over contiguous memory in both the source and the
// destination, which lets the compiler vectorize them.

// A: (M,K), B: (K,N), C: (M,N)
inline void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t N, const double* A,
                    const double* B, double* C) {
    for (std::int64_t m = 0; m < M; ++m) {
        const double* a_row = A + m * K;
        double* c_row = C + m * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const double a = a_row[k];
            if (a == 0.0) continue;
            const double* b_row = B + k * N;
            for (std::int64_t n = 0; n < N; ++n) c_row[n] += a * b_row[n];
        }
    }
}

// A: (M,K), B: (N,K) used transposed, C: (M,N)
inline void gemm_nt(std::int64_t M, std::int64_t K, std::int64_t N, const double* A,
                    const double* B, double* C) {
    for (std::int64_t m = 0; m < M; ++m) {
        const double* a_row = A + m * K;
        double* c_row = C + m * N;
        for (std::int64_t n = 0; n < N; ++n) {
            const double* b_row = B + n * K;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            std::int64_t k = 0;
            for (; k + 4 <= K; k += 4) {
                s0 += a_row[k] * b_row[k];
                s1 += a_row[k + 1] * b_row[k + 1];
                s2 += a_row[k + 2] * b_row[k + 2];
                s3 += a_row[k + 3] * b_row[k + 3];
            }
            for (; k < K; ++k) s0 += a_row[k] * b_row[k];
            c_row[n] += s0 + s1 + s2 + s3;
        }
    }
}

// A: (K,M) used transposed, B: (K,N), C: (M,N)
inline void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t N, const double* A,
                    const double* B, double* C) {
    for (std::int64_t k = 0; k < K; ++k) {
        const double* a_row = A + k * M;
        const double* b_row = B + k * N;
        for (std::int64_t m = 0; m < M; ++m) {
            const double a = a_row[m];
            if (a == 0.0) continue;
            double* c_row = C + m * N;
            for (std::int64_t n = 0; n < N; ++n) c_row[n] += a * b_row[n];
        }
    }
}

}  // namespace mmfl
