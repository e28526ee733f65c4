#include <doctest.h>

#include <vector>

#include "helpers.hpp"
#include "mspnet/kernels.hpp"

using namespace mspnet;

TEST_SUITE_BEGIN("kernels");

namespace {

std::vector<double> rand_vec(std::size_t n, RngState& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

} // namespace

TEST_CASE("parallel kernels match the serial reference") {
    RngState rng(101);
    const int r = 37, s = 53, t = 29;
    const auto a = rand_vec((std::size_t)r * s, rng);
    const auto b = rand_vec((std::size_t)s * t, rng);
    const auto g = rand_vec((std::size_t)r * t, rng);

    // The two loop nests associate additions differently, so agreement is up
    // to reassociation rounding, not bitwise.
    std::vector<double> c_ref((std::size_t)r * t), c_ker((std::size_t)r * t);
    ref::matmul(a.data(), b.data(), c_ref.data(), r, s, t);
    kernels::matmul(a.data(), b.data(), c_ker.data(), r, s, t);
    CHECK(testutil::max_rel_err(c_ref, c_ker) < 1e-12);

    std::vector<double> da_ref((std::size_t)r * s, 0.5), da_ker = da_ref;
    ref::matmul_acc_gbt(g.data(), b.data(), da_ref.data(), r, s, t);
    kernels::matmul_acc_gbt(g.data(), b.data(), da_ker.data(), r, s, t);
    CHECK(testutil::max_rel_err(da_ref, da_ker) < 1e-12);

    std::vector<double> db_ref((std::size_t)s * t, -0.25), db_ker = db_ref;
    ref::matmul_acc_atg(a.data(), g.data(), db_ref.data(), r, s, t);
    kernels::matmul_acc_atg(a.data(), g.data(), db_ker.data(), r, s, t);
    CHECK(testutil::max_rel_err(db_ref, db_ker) < 1e-12);

    std::vector<double> m_ref((std::size_t)t), v_ref((std::size_t)t), m_ker((std::size_t)t),
        v_ker((std::size_t)t);
    ref::column_mean_var(g.data(), r, t, m_ref.data(), v_ref.data());
    kernels::column_mean_var(g.data(), r, t, m_ker.data(), v_ker.data());
    CHECK(testutil::max_rel_err(m_ref, m_ker) < 1e-12);
    CHECK(testutil::max_rel_err(v_ref, v_ker) < 1e-12);
}

TEST_CASE("results are bitwise identical across thread counts") {
    RngState rng(103);
    const int r = 64, s = 48, t = 80; // large enough to trip the parallel path
    const auto a = rand_vec((std::size_t)r * s, rng);
    const auto b = rand_vec((std::size_t)s * t, rng);
    const auto g = rand_vec((std::size_t)r * t, rng);

    std::vector<double> c1((std::size_t)r * t), c2((std::size_t)r * t);
    std::vector<double> da1((std::size_t)r * s, 0.0), da2((std::size_t)r * s, 0.0);
    std::vector<double> db1((std::size_t)s * t, 0.0), db2((std::size_t)s * t, 0.0);

    set_threads(1);
    kernels::matmul(a.data(), b.data(), c1.data(), r, s, t);
    kernels::matmul_acc_gbt(g.data(), b.data(), da1.data(), r, s, t);
    kernels::matmul_acc_atg(a.data(), g.data(), db1.data(), r, s, t);
    set_threads(2);
    kernels::matmul(a.data(), b.data(), c2.data(), r, s, t);
    kernels::matmul_acc_gbt(g.data(), b.data(), da2.data(), r, s, t);
    kernels::matmul_acc_atg(a.data(), g.data(), db2.data(), r, s, t);

    CHECK(c1 == c2);
    CHECK(da1 == da2);
    CHECK(db1 == db2);
}

TEST_SUITE_END();
