#pragma once
#include <cstddef>

// Dense inner loops shared by the autodiff ops. The kernels namespace holds
// the OpenMP-parallel production versions; ref holds plain serial loops that
// the tests and the benchmark compare against.
//
// Every kernel accumulates each output element in a fixed index order, so
// results do not depend on the number of threads.

namespace mspnet {

// Worker cap for all OpenMP regions in this library (1 = serial).
void set_threads(int n);
int max_threads();

// Runs body(i) for i in [0, n). Forks an OpenMP team only when the work is
// worth it; an `if` clause would still enter the OpenMP runtime and its
// per-region cost dwarfs small tensor ops.
template <class Body>
inline void par_for(long long n, long long flops, const Body& body) {
    if (flops > (1 << 14) && max_threads() > 1) {
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < n; ++i) body(i);
    } else {
        for (long long i = 0; i < n; ++i) body(i);
    }
}

namespace kernels {

// c[r x t] = a[r x s] * b[s x t]
void matmul(const double* a, const double* b, double* c, int r, int s, int t);

// da[r x s] += g[r x t] * b[s x t]^T      (gradient wrt the left operand)
void matmul_acc_gbt(const double* g, const double* b, double* da, int r, int s, int t);

// db[s x t] += a[r x s]^T * g[r x t]      (gradient wrt the right operand)
void matmul_acc_atg(const double* a, const double* g, double* db, int r, int s, int t);

// Per-column mean and biased variance of x[rows x cols].
void column_mean_var(const double* x, int rows, int cols, double* mean, double* var);

// sums[j] = sum_i x[i][j]
void column_sums(const double* x, int rows, int cols, double* sums);

// sums[j] = sum_i x[i][j] * w[i][j]
void column_weighted_sums(const double* x, const double* w, int rows, int cols, double* sums);

} // namespace kernels

namespace ref {

void matmul(const double* a, const double* b, double* c, int r, int s, int t);
void matmul_acc_gbt(const double* g, const double* b, double* da, int r, int s, int t);
void matmul_acc_atg(const double* a, const double* g, double* db, int r, int s, int t);
void column_mean_var(const double* x, int rows, int cols, double* mean, double* var);

} // namespace ref
} // namespace mspnet
