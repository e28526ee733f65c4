// Timings of the OpenMP kernels against their serial reference, plus a full
// forward/backward pass. Run with --threads N; --quick shrinks the sizes for
// smoke testing.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "mspnet/kernels.hpp"
#include "mspnet/model.hpp"
#include "mspnet/occlusion.hpp"
#include "mspnet/rng.hpp"
#include "mspnet/shapedata.hpp"
#include "mspnet/tensor.hpp"
#include "mspnet/training.hpp"

using namespace mspnet;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<double> random_vec(std::size_t n, RngState& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), 1e-8});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

void row(const char* name, double serial_ms, double parallel_ms, double diff) {
    std::printf("%-28s %10.2f ms %10.2f ms %8.2fx   max rel diff %.2e\n", name, serial_ms, parallel_ms,
                serial_ms / parallel_ms, diff);
}

void bench_matmul(int r, int s, int t, int reps) {
    RngState rng(7);
    const auto a = random_vec((std::size_t)r * s, rng);
    const auto b = random_vec((std::size_t)s * t, rng);
    std::vector<double> c_ref((std::size_t)r * t), c_par((std::size_t)r * t);

    auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) ref::matmul(a.data(), b.data(), c_ref.data(), r, s, t);
    const double serial = ms_since(t0) / reps;

    t0 = Clock::now();
    for (int i = 0; i < reps; ++i) kernels::matmul(a.data(), b.data(), c_par.data(), r, s, t);
    const double parallel = ms_since(t0) / reps;

    char name[64];
    std::snprintf(name, sizeof(name), "matmul %dx%dx%d", r, s, t);
    row(name, serial, parallel, max_rel_diff(c_ref, c_par));
}

void bench_grads(int r, int s, int t, int reps) {
    RngState rng(11);
    const auto a = random_vec((std::size_t)r * s, rng);
    const auto b = random_vec((std::size_t)s * t, rng);
    const auto g = random_vec((std::size_t)r * t, rng);
    std::vector<double> da_ref((std::size_t)r * s, 0.0), da_par = da_ref;
    std::vector<double> db_ref((std::size_t)s * t, 0.0), db_par = db_ref;

    auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) {
        ref::matmul_acc_gbt(g.data(), b.data(), da_ref.data(), r, s, t);
        ref::matmul_acc_atg(a.data(), g.data(), db_ref.data(), r, s, t);
    }
    const double serial = ms_since(t0) / reps;

    t0 = Clock::now();
    for (int i = 0; i < reps; ++i) {
        kernels::matmul_acc_gbt(g.data(), b.data(), da_par.data(), r, s, t);
        kernels::matmul_acc_atg(a.data(), g.data(), db_par.data(), r, s, t);
    }
    const double parallel = ms_since(t0) / reps;

    char name[64];
    std::snprintf(name, sizeof(name), "matmul grads %dx%dx%d", r, s, t);
    row(name, serial, parallel, std::max(max_rel_diff(da_ref, da_par), max_rel_diff(db_ref, db_par)));
}

void bench_boundary(int dim) {
    LabelVolume vol;
    vol.dims = {dim, dim, dim};
    vol.labels.assign((std::size_t)dim * dim * dim, 0);
    RngState rng(13);
    // A rough ball of label 1.
    const double r2 = 0.16 * dim * dim;
    for (int z = 0; z < dim; ++z)
        for (int y = 0; y < dim; ++y)
            for (int x = 0; x < dim; ++x) {
                const double dx = x - dim / 2.0, dy = y - dim / 2.0, dz = z - dim / 2.0;
                if (dx * dx + dy * dy + dz * dz < r2) vol.labels[vol.linear(x, y, z)] = 1;
            }

    const int saved = max_threads();
    set_threads(1);
    auto t0 = Clock::now();
    PointCloud serial_cloud = extract_boundary(vol, 1);
    const double serial = ms_since(t0);
    set_threads(saved);

    t0 = Clock::now();
    PointCloud par_cloud = extract_boundary(vol, 1);
    const double parallel = ms_since(t0);

    char name[64];
    std::snprintf(name, sizeof(name), "boundary %d^3", dim);
    row(name, serial, parallel, serial_cloud.points == par_cloud.points ? 0.0 : 1.0);
}

void bench_forward_backward(int n, int batch, int reps) {
    ModelConfig cfg;
    cfg.branches = 2;
    cfg.points = n;
    cfg.feature_mlp = {32, 32};
    cfg.post_mlp = {32, 64};
    cfg.head = {128, 64};
    cfg.point_tnet = {{16, 32, 64}, {32, 16}};
    cfg.feature_tnet = {{32, 64, 128}, {64, 32}};
    RngState rng(17);
    Model model(cfg, rng);

    RngState data_rng(19);
    std::vector<std::vector<Tensor>> clouds;
    for (int s = 0; s < batch; ++s) {
        std::vector<Tensor> per;
        for (int j = 0; j < cfg.branches; ++j)
            per.push_back(Tensor::leaf({n, 3}, random_vec((std::size_t)n * 3, data_rng)));
        clouds.push_back(per);
    }
    std::vector<double> targets((std::size_t)batch);
    for (int s = 0; s < batch; ++s) targets[(std::size_t)s] = s % 2;

    auto params = model.parameters();
    Adam opt;
    RngState drop(23);
    auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) {
        BatchOutput out = model.forward_batch(clouds, Mode::train, &drop);
        Tensor loss = batch_total_loss(out, targets, Task::classification, 1e-3);
        opt.zero_grads(params);
        backward(loss);
        opt.step(params);
    }
    std::printf("%-28s %10.2f ms per forward+backward+step (batch %d, n %d, threads %d)\n",
                "train step", ms_since(t0) / reps, batch, n, max_threads());
}

} // namespace

int main(int argc, char** argv) {
    int threads = 2;
    bool quick = false;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--threads") == 0 && i + 1 < argc) threads = std::atoi(argv[++i]);
        if (std::strcmp(argv[i], "--quick") == 0) quick = true;
    }
    set_threads(threads);
    std::printf("threads: %d\n", threads);
    std::printf("%-28s %13s %13s %9s\n", "kernel", "serial", "parallel", "speedup");

    if (quick) {
        bench_matmul(128, 64, 128, 5);
        bench_grads(128, 64, 128, 5);
        bench_boundary(32);
        bench_forward_backward(64, 4, 2);
    } else {
        bench_matmul(512, 512, 512, 3);
        bench_matmul(4096, 64, 128, 10);
        bench_grads(512, 512, 512, 3);
        bench_grads(4096, 64, 128, 10);
        bench_boundary(128);
        bench_forward_backward(256, 16, 3);
    }
    return 0;
}
