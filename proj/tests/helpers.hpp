#pragma once
#include <cmath>
#include <functional>
#include <vector>

#include "mspnet/model.hpp"
#include "mspnet/tensor.hpp"

namespace testutil {

// The toy architecture used by the full-model gradient checks:
// m = 2 branches, n = 16 points, k = 8 features, widths [8,8]/[8,16]/[32,16,2].
inline mspnet::ModelConfig toy_config() {
    mspnet::ModelConfig cfg;
    cfg.type = mspnet::ModelType::mspnet;
    cfg.task = mspnet::Task::classification;
    cfg.branches = 2;
    cfg.points = 16;
    cfg.classes = 2;
    cfg.feature_mlp = {8, 8};
    cfg.post_mlp = {8, 16};
    cfg.head = {32, 16};
    cfg.point_tnet = {{8, 16}, {8}};
    cfg.feature_tnet = {{8, 16}, {8}};
    return cfg;
}

inline std::vector<std::vector<mspnet::Tensor>> random_batch(const mspnet::ModelConfig& cfg, int batch,
                                                             mspnet::RngState& rng) {
    std::vector<std::vector<mspnet::Tensor>> clouds;
    for (int s = 0; s < batch; ++s) {
        std::vector<mspnet::Tensor> per;
        for (int j = 0; j < cfg.branches; ++j) {
            std::vector<double> v((std::size_t)cfg.points * 3);
            for (auto& x : v) x = rng.uniform(-1.0, 1.0);
            per.push_back(mspnet::Tensor::leaf({cfg.points, 3}, std::move(v), false));
        }
        clouds.push_back(std::move(per));
    }
    return clouds;
}

// Central finite differences of a scalar functional with respect to one
// tensor's values. The functional must be a pure function of the current
// tensor contents.
inline std::vector<double> fd_gradient(mspnet::Tensor& x, const std::function<double()>& f,
                                       double h = 1e-5) {
    std::vector<double> g(x.values().size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double saved = x.values()[i];
        x.values()[i] = saved + h;
        const double up = f();
        x.values()[i] = saved - h;
        const double down = f();
        x.values()[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Relative error with the absolute floor 1e-8 in the denominator. A central
// difference at h = 1e-5 in 64-bit carries rounding noise of order
// eps * |loss| / h times the forward chain's condition, i.e. up to ~1e-9
// here; absolute disagreements below that are not resolvable by the oracle
// and count as agreement.
inline double rel_err(double a, double b) {
    if (std::fabs(a - b) <= 1e-9) return 0.0;
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
    return worst;
}

inline mspnet::Tensor random_tensor(std::vector<int> shape, mspnet::RngState& rng,
                                    bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
    long long n = 1;
    for (int e : shape) n *= e;
    std::vector<double> v((std::size_t)n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return mspnet::Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

// Fixed random weights turn any tensor into a scalar with non-trivial
// upstream gradients.
inline mspnet::Tensor weighted_sum(const mspnet::Tensor& t, mspnet::RngState& rng) {
    std::vector<double> w(t.values().size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return mspnet::sum(mspnet::mul(t, mspnet::Tensor::leaf(t.shape(), std::move(w), false)));
}

} // namespace testutil
