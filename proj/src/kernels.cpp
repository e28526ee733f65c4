#include "mspnet/kernels.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mspnet {

namespace {
std::atomic<int> g_threads{1};
}

void set_threads(int n) {
    g_threads.store(n < 1 ? 1 : n);
#ifdef _OPENMP
    omp_set_num_threads(n < 1 ? 1 : n);
#endif
}

int max_threads() { return g_threads.load(); }

namespace kernels {

void matmul(const double* a, const double* b, double* c, int r, int s, int t) {
    par_for(r, (long long)r * s * t, [=](long long i) {
        double* ci = c + (std::size_t)i * t;
        std::fill(ci, ci + t, 0.0);
        const double* ai = a + (std::size_t)i * s;
        for (int k = 0; k < s; ++k) {
            const double aik = ai[k];
            const double* bk = b + (std::size_t)k * t;
#pragma omp simd
            for (int j = 0; j < t; ++j) ci[j] += aik * bk[j];
        }
    });
}

void matmul_acc_gbt(const double* g, const double* b, double* da, int r, int s, int t) {
    // Few gradient rows over a large s: split the k axis instead so b is
    // streamed once in total.
    if (r <= 64 && (long long)s * t > (1 << 18)) {
        par_for(s, (long long)r * s * t, [=](long long k) {
            const double* bk = b + (std::size_t)k * t;
            for (int i = 0; i < r; ++i) {
                const double* gi = g + (std::size_t)i * t;
                double acc = 0.0;
#pragma omp simd reduction(+ : acc)
                for (int j = 0; j < t; ++j) acc += gi[j] * bk[j];
                da[(std::size_t)i * s + k] += acc;
            }
        });
        return;
    }
    par_for(r, (long long)r * s * t, [=](long long i) {
        const double* gi = g + (std::size_t)i * t;
        double* di = da + (std::size_t)i * s;
        for (int k = 0; k < s; ++k) {
            const double* bk = b + (std::size_t)k * t;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (int j = 0; j < t; ++j) acc += gi[j] * bk[j];
            di[k] += acc;
        }
    });
}

void matmul_acc_atg(const double* a, const double* g, double* db, int r, int s, int t) {
    par_for(s, (long long)r * s * t, [=](long long k) {
        double* dk = db + (std::size_t)k * t;
        for (int i = 0; i < r; ++i) {
            const double aik = a[(std::size_t)i * s + k];
            const double* gi = g + (std::size_t)i * t;
#pragma omp simd
            for (int j = 0; j < t; ++j) dk[j] += aik * gi[j];
        }
    });
}

namespace {
constexpr int kColBlock = 16;
}

void column_mean_var(const double* x, int rows, int cols, double* mean, double* var) {
    // Column blocks with row-major traversal: sequential reads, and each
    // column still accumulates in ascending-row order.
    const int blocks = (cols + kColBlock - 1) / kColBlock;
    par_for(blocks, (long long)rows * cols, [=](long long bi) {
        const int jb = (int)bi * kColBlock;
        const int width = std::min(kColBlock, cols - jb);
        double s[kColBlock] = {};
        for (int i = 0; i < rows; ++i) {
            const double* row = x + (std::size_t)i * cols + jb;
            for (int u = 0; u < width; ++u) s[u] += row[u];
        }
        for (int u = 0; u < width; ++u) mean[jb + u] = s[u] / rows;
        double acc[kColBlock] = {};
        for (int i = 0; i < rows; ++i) {
            const double* row = x + (std::size_t)i * cols + jb;
            for (int u = 0; u < width; ++u) {
                const double d = row[u] - mean[jb + u];
                acc[u] += d * d;
            }
        }
        for (int u = 0; u < width; ++u) var[jb + u] = acc[u] / rows;
    });
}

void column_sums(const double* x, int rows, int cols, double* sums) {
    const int blocks = (cols + kColBlock - 1) / kColBlock;
    par_for(blocks, (long long)rows * cols, [=](long long bi) {
        const int jb = (int)bi * kColBlock;
        const int width = std::min(kColBlock, cols - jb);
        double s[kColBlock] = {};
        for (int i = 0; i < rows; ++i) {
            const double* row = x + (std::size_t)i * cols + jb;
            for (int u = 0; u < width; ++u) s[u] += row[u];
        }
        for (int u = 0; u < width; ++u) sums[jb + u] = s[u];
    });
}

void column_weighted_sums(const double* x, const double* w, int rows, int cols, double* sums) {
    const int blocks = (cols + kColBlock - 1) / kColBlock;
    par_for(blocks, (long long)rows * cols, [=](long long bi) {
        const int jb = (int)bi * kColBlock;
        const int width = std::min(kColBlock, cols - jb);
        double s[kColBlock] = {};
        for (int i = 0; i < rows; ++i) {
            const double* xr = x + (std::size_t)i * cols + jb;
            const double* wr = w + (std::size_t)i * cols + jb;
            for (int u = 0; u < width; ++u) s[u] += xr[u] * wr[u];
        }
        for (int u = 0; u < width; ++u) sums[jb + u] = s[u];
    });
}

} // namespace kernels

namespace ref {

void matmul(const double* a, const double* b, double* c, int r, int s, int t) {
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < t; ++j) {
            double acc = 0.0;
            for (int k = 0; k < s; ++k) acc += a[(std::size_t)i * s + k] * b[(std::size_t)k * t + j];
            c[(std::size_t)i * t + j] = acc;
        }
}

void matmul_acc_gbt(const double* g, const double* b, double* da, int r, int s, int t) {
    for (int i = 0; i < r; ++i)
        for (int k = 0; k < s; ++k) {
            double acc = 0.0;
            for (int j = 0; j < t; ++j) acc += g[(std::size_t)i * t + j] * b[(std::size_t)k * t + j];
            da[(std::size_t)i * s + k] += acc;
        }
}

void matmul_acc_atg(const double* a, const double* g, double* db, int r, int s, int t) {
    for (int k = 0; k < s; ++k)
        for (int j = 0; j < t; ++j) {
            double acc = 0.0;
            for (int i = 0; i < r; ++i) acc += a[(std::size_t)i * s + k] * g[(std::size_t)i * t + j];
            db[(std::size_t)k * t + j] += acc;
        }
}

void column_mean_var(const double* x, int rows, int cols, double* mean, double* var) {
    for (int j = 0; j < cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < rows; ++i) s += x[(std::size_t)i * cols + j];
        mean[j] = s / rows;
        double acc = 0.0;
        for (int i = 0; i < rows; ++i) {
            const double d = x[(std::size_t)i * cols + j] - mean[j];
            acc += d * d;
        }
        var[j] = acc / rows;
    }
}

} // namespace ref
} // namespace mspnet
