#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mspnet/tensor.hpp"

using namespace mspnet;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::random_tensor;
using testutil::weighted_sum;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("leaf invariants") {
    Tensor t = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.values().size() == 6);
    CHECK(t.grad().size() == 6);
    CHECK_FALSE(t.requires_grad());
    CHECK_THROWS_AS(Tensor::leaf({2, 2}, {1.0}), ShapeError);
}

TEST_CASE("matmul identity and hand results") {
    Tensor i2 = Tensor::identity(2);
    Tensor a = Tensor::leaf({2, 2}, {1, 2, 3, 4});
    Tensor prod = matmul(i2, a);
    CHECK(prod.values() == std::vector<double>{1, 2, 3, 4});

    Tensor row = Tensor::leaf({1, 2}, {1, 2});
    Tensor col = Tensor::leaf({2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a = Tensor::leaf({2, 3}, std::vector<double>(6, 0.0));
    Tensor b = Tensor::leaf({2, 2}, std::vector<double>(4, 0.0));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs finite differences") {
    RngState rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        Tensor loss = sum(matmul(a, b));
        backward(loss);
        auto fa = fd_gradient(a, [&] { return sum(matmul(a, b)).item(); });
        auto fb = fd_gradient(b, [&] { return sum(matmul(a, b)).item(); });
        CHECK(max_rel_err(a.grad(), fa) < 1e-6);
        CHECK(max_rel_err(b.grad(), fb) < 1e-6);
    }
}

TEST_CASE("relu basics") {
    Tensor x = Tensor::leaf({3}, {-1, 0, 2}, true);
    Tensor y = relu(x);
    CHECK(y.values() == std::vector<double>{0, 0, 2});
    backward(sum(y));
    CHECK(x.grad() == std::vector<double>{0, 0, 1});

    Tensor neg = Tensor::leaf({4}, {-3, -2, -1, -0.5}, true);
    Tensor yn = relu(neg);
    for (double v : yn.values()) CHECK(v == 0.0);
    backward(sum(yn));
    for (double g : neg.grad()) CHECK(g == 0.0);
}

TEST_CASE("relu gradient vs finite differences away from the kink") {
    RngState rng(7);
    Tensor x = random_tensor({4, 4}, rng);
    for (auto& v : x.values())
        if (std::fabs(v) < 0.1) v = v < 0 ? v - 0.1 : v + 0.1;
    RngState wrng(8);
    Tensor loss = weighted_sum(relu(x), wrng);
    backward(loss);
    // the rng restarts inside the lambda, so every evaluation sees the same weights
    auto fd = fd_gradient(x, [&] {
        RngState w(8);
        return weighted_sum(relu(x), w).item();
    });
    CHECK(max_rel_err(x.grad(), fd) < 1e-6);
}

TEST_CASE("batch norm infer identity with unit running stats") {
    BatchNorm bn(3);
    Tensor x = Tensor::leaf({2, 3}, {1, -2, 3, 0.5, 0, -1}, false);
    Tensor y = bn.forward(x, Mode::infer);
    for (std::size_t i = 0; i < x.values().size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-5));
}

TEST_CASE("batch norm train output is normalized before the affine part") {
    BatchNorm bn(3);
    RngState rng(11);
    // Batch variance well above eps, so the eps shift stays below the 1e-6 bar.
    Tensor x = random_tensor({16, 3}, rng, false, -20.0, 50.0);
    Tensor y = bn.forward(x, Mode::train);
    for (int j = 0; j < 3; ++j) {
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < 16; ++i) mean += y.at(i, j);
        mean /= 16;
        for (int i = 0; i < 16; ++i) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        var /= 16;
        CHECK(std::fabs(mean) < 1e-6);
        CHECK(std::fabs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("batch norm rejects train batches of one") {
    BatchNorm bn(2);
    Tensor x = Tensor::leaf({1, 2}, {1, 2});
    CHECK_THROWS_AS(bn.forward(x, Mode::train), ValueError);
    CHECK_NOTHROW(bn.forward(x, Mode::infer));
}

TEST_CASE("batch norm gradient vs finite differences (train and infer)") {
    for (Mode mode : {Mode::train, Mode::infer}) {
        RngState rng(13);
        BatchNorm bn(3);
        // Non-trivial affine and running state.
        for (auto& v : bn.gamma.values()) v = rng.uniform(0.5, 1.5);
        for (auto& v : bn.beta.values()) v = rng.uniform(-0.5, 0.5);
        for (auto& v : bn.running_mean) v = rng.uniform(-0.3, 0.3);
        for (auto& v : bn.running_var) v = rng.uniform(0.5, 1.5);
        Tensor x = random_tensor({4, 3}, rng);
        RngState wrng(14);
        const auto run = [&] {
            BatchNorm probe = bn; // keep running stats untouched across evals
            RngState w(14);
            return weighted_sum(probe.forward(x, mode), w).item();
        };
        BatchNorm live = bn;
        Tensor loss = weighted_sum(live.forward(x, mode), wrng);
        backward(loss);
        CHECK(max_rel_err(x.grad(), fd_gradient(x, run)) < 1e-5);
        CHECK(max_rel_err(live.gamma.grad(), fd_gradient(bn.gamma, [&] {
                  BatchNorm probe = bn;
                  probe.gamma = bn.gamma;
                  RngState w(14);
                  return weighted_sum(probe.forward(x, mode), w).item();
              })) < 1e-5);
        CHECK(max_rel_err(live.beta.grad(), fd_gradient(bn.beta, [&] {
                  BatchNorm probe = bn;
                  probe.beta = bn.beta;
                  RngState w(14);
                  return weighted_sum(probe.forward(x, mode), w).item();
              })) < 1e-5);
    }
}

TEST_CASE("batch norm running stats update with momentum 0.9") {
    BatchNorm bn(1);
    Tensor x = Tensor::leaf({4, 1}, {1, 2, 3, 4});
    bn.forward(x, Mode::train);
    // batch mean 2.5, biased var 1.25
    CHECK(bn.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5).epsilon(1e-12));
    CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25).epsilon(1e-12));
}

TEST_CASE("dropout semantics") {
    RngState rng(17);
    Tensor x = random_tensor({50}, rng, false);

    SUBCASE("keep 1 is identity in any mode") {
        RngState r(1);
        Tensor y = dropout(x, 1.0, Mode::train, r);
        CHECK(y.values() == x.values());
    }
    SUBCASE("infer mode is identity") {
        RngState r(1);
        Tensor y = dropout(x, 0.3, Mode::infer, r);
        CHECK(y.values() == x.values());
    }
    SUBCASE("keep_prob out of range") {
        RngState r(1);
        CHECK_THROWS_AS(dropout(x, 0.0, Mode::train, r), ValueError);
        CHECK_THROWS_AS(dropout(x, 1.5, Mode::train, r), ValueError);
    }
    SUBCASE("train mode surviving fraction and scaling") {
        RngState data(19);
        Tensor big = random_tensor({100000}, data, false, 0.5, 1.5);
        RngState r(23);
        Tensor y = dropout(big, 0.3, Mode::train, r);
        long long survivors = 0;
        for (std::size_t i = 0; i < y.values().size(); ++i) {
            if (y.values()[i] != 0.0) {
                ++survivors;
                CHECK(y.values()[i] == doctest::Approx(big.values()[i] / 0.3).epsilon(1e-12));
            }
        }
        const double fraction = (double)survivors / (double)big.numel();
        CHECK(fraction > 0.29);
        CHECK(fraction < 0.31);
    }
    SUBCASE("same seed gives a bitwise-identical mask") {
        RngState r1(99), r2(99);
        Tensor y1 = dropout(x, 0.3, Mode::train, r1);
        Tensor y2 = dropout(x, 0.3, Mode::train, r2);
        CHECK(y1.values() == y2.values());
    }
    SUBCASE("gradient uses the stored mask") {
        RngState data(29);
        Tensor xx = random_tensor({40}, data);
        RngState r(31);
        Tensor y = dropout(xx, 0.4, Mode::train, r);
        backward(sum(y));
        for (std::size_t i = 0; i < xx.grad().size(); ++i) {
            if (y.values()[i] != 0.0)
                CHECK(xx.grad()[i] == doctest::Approx(1.0 / 0.4).epsilon(1e-12));
            else
                CHECK(xx.grad()[i] == 0.0);
        }
    }
}

TEST_CASE("max over points") {
    Tensor x = Tensor::leaf({2, 2}, {1, 5, 3, 2});
    CHECK(max_over_points(x).values() == std::vector<double>{3, 5});

    Tensor single = Tensor::leaf({1, 3}, {7, -1, 0});
    CHECK(max_over_points(single).values() == std::vector<double>{7, -1, 0});

    SUBCASE("row permutation leaves the value unchanged") {
        Tensor perm = Tensor::leaf({2, 2}, {3, 2, 1, 5});
        CHECK(max_over_points(perm).values() == max_over_points(x).values());
    }
    SUBCASE("ties route gradient to the first argmax row") {
        Tensor t = Tensor::leaf({3, 1}, {4, 4, 1}, true);
        backward(sum(max_over_points(t)));
        CHECK(t.grad() == std::vector<double>{1, 0, 0});
    }
    SUBCASE("gradient vs finite differences with distinct maxima") {
        RngState rng(37);
        Tensor t = random_tensor({6, 3}, rng);
        RngState w(38);
        Tensor loss = weighted_sum(max_over_points(t), w);
        backward(loss);
        auto fd = fd_gradient(t, [&] {
            RngState w2(38);
            return weighted_sum(max_over_points(t), w2).item();
        });
        CHECK(max_rel_err(t.grad(), fd) < 1e-6);
    }
}

TEST_CASE("softmax cross entropy") {
    SUBCASE("two equal logits give ln 2") {
        Tensor logits = Tensor::leaf({1, 2}, {0, 0});
        const int labels[] = {0};
        CHECK(softmax_cross_entropy(logits, labels).item() ==
              doctest::Approx(0.6931471805599453).epsilon(1e-12));
    }
    SUBCASE("large logits do not overflow") {
        Tensor logits = Tensor::leaf({1, 2}, {1000, 0});
        const int labels[] = {0};
        const double loss = softmax_cross_entropy(logits, labels).item();
        CHECK(std::isfinite(loss));
        CHECK(loss < 1e-9);
    }
    SUBCASE("label out of range") {
        Tensor logits = Tensor::leaf({1, 2}, {0, 0});
        const int labels[] = {2};
        CHECK_THROWS_AS(softmax_cross_entropy(logits, labels), ValueError);
    }
    SUBCASE("gradient vs finite differences, batch 3 x 4 classes") {
        RngState rng(41);
        Tensor logits = random_tensor({3, 4}, rng);
        const int labels[] = {1, 3, 0};
        Tensor loss = softmax_cross_entropy(logits, labels);
        backward(loss);
        auto fd = fd_gradient(logits, [&] { return softmax_cross_entropy(logits, labels).item(); });
        CHECK(max_rel_err(logits.grad(), fd) < 1e-6);
    }
}

TEST_CASE("mse") {
    Tensor same = Tensor::leaf({3}, {1, 2, 3});
    const double t_same[] = {1, 2, 3};
    CHECK(mse(same, t_same).item() == 0.0);

    Tensor pred = Tensor::leaf({2}, {0, 0}, true);
    const double target[] = {1, 3};
    Tensor loss = mse(pred, target);
    CHECK(loss.item() == doctest::Approx(5.0).epsilon(1e-15));
    backward(loss);
    // exact gradient 2(p - t)/n
    CHECK(pred.grad()[0] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(pred.grad()[1] == doctest::Approx(-3.0).epsilon(1e-15));
    auto fd = fd_gradient(pred, [&] { return mse(pred, target).item(); });
    CHECK(max_rel_err(pred.grad(), fd) < 1e-6);

    const double bad[] = {1, 2, 3};
    CHECK_THROWS_AS(mse(pred, bad), ShapeError);
}

TEST_CASE("orthogonality penalty") {
    CHECK(ortho_regularizer(Tensor::identity(4)).item() == 0.0);

    SUBCASE("rotation matrices have zero penalty and zero gradient") {
        Tensor rot = Tensor::leaf({2, 2}, {0, -1, 1, 0}, true); // 90 degrees
        Tensor loss = ortho_regularizer(rot);
        CHECK(loss.item() == 0.0);
        backward(loss);
        for (double g : rot.grad()) CHECK(std::fabs(g) < 1e-10);
    }
    SUBCASE("2I gives exactly 18") {
        Tensor t = Tensor::leaf({2, 2}, {2, 0, 0, 2});
        CHECK(ortho_regularizer(t).item() == 18.0);
    }
    SUBCASE("non-square rejected") {
        Tensor t = Tensor::leaf({2, 3}, std::vector<double>(6, 0.0));
        CHECK_THROWS_AS(ortho_regularizer(t), ShapeError);
    }
    SUBCASE("non-negative everywhere, zero only when orthogonal") {
        RngState rng(43);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor t = random_tensor({3, 3}, rng, false);
            CHECK(ortho_regularizer(t).item() >= 0.0);
        }
    }
    SUBCASE("gradient vs finite differences") {
        RngState rng(47);
        Tensor t = random_tensor({3, 3}, rng);
        Tensor loss = ortho_regularizer(t);
        backward(loss);
        auto fd = fd_gradient(t, [&] { return ortho_regularizer(t).item(); });
        CHECK(max_rel_err(t.grad(), fd) < 1e-6);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("sum gives all-ones gradient and unit root grad") {
        Tensor x = Tensor::leaf({4}, {1, 2, 3, 4}, true);
        Tensor root = sum(x);
        backward(root);
        CHECK(root.grad()[0] == 1.0);
        CHECK(x.grad() == std::vector<double>{1, 1, 1, 1});
    }
    SUBCASE("non-scalar root rejected") {
        Tensor x = Tensor::leaf({2}, {1, 2}, true);
        CHECK_THROWS_AS(backward(x), ShapeError);
    }
    SUBCASE("double consumption sums both contributions exactly") {
        Tensor x = Tensor::leaf({3}, {1.5, -2, 0.25}, true);
        backward(sum(mul(x, x)));
        for (int i = 0; i < 3; ++i) CHECK(x.grad()[(std::size_t)i] == 2.0 * x.values()[(std::size_t)i]);
    }
    SUBCASE("repeated backward accumulates") {
        Tensor x = Tensor::leaf({2}, {1, 1}, true);
        Tensor root = sum(x);
        backward(root);
        backward(root);
        CHECK(x.grad() == std::vector<double>{2, 2});
    }
    SUBCASE("leaves without requires_grad stay at zero") {
        Tensor x = Tensor::leaf({2}, {1, 2}, true);
        Tensor c = Tensor::leaf({2}, {3, 4}, false);
        backward(sum(mul(x, c)));
        CHECK(c.grad() == std::vector<double>{0, 0});
        CHECK(x.grad() == std::vector<double>{3, 4});
    }
}

TEST_CASE("composition ops carry gradients") {
    RngState rng(53);
    SUBCASE("broadcast add") {
        Tensor x = random_tensor({4, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        RngState w(54);
        backward(weighted_sum(add(x, b), w));
        auto fdx = fd_gradient(x, [&] {
            RngState w2(54);
            return weighted_sum(add(x, b), w2).item();
        });
        auto fdb = fd_gradient(b, [&] {
            RngState w2(54);
            return weighted_sum(add(x, b), w2).item();
        });
        CHECK(max_rel_err(x.grad(), fdx) < 1e-6);
        CHECK(max_rel_err(b.grad(), fdb) < 1e-6);
    }
    SUBCASE("concat along both axes") {
        for (int axis : {0, 1}) {
            Tensor a = random_tensor({2, 3}, rng);
            Tensor b = random_tensor({2, 3}, rng);
            RngState w(55);
            backward(weighted_sum(concat({a, b}, axis), w));
            auto fd = fd_gradient(a, [&] {
                RngState w2(55);
                return weighted_sum(concat({a, b}, axis), w2).item();
            });
            CHECK(max_rel_err(a.grad(), fd) < 1e-6);
        }
    }
    SUBCASE("reshape and slice") {
        Tensor x = random_tensor({4, 3}, rng);
        RngState w(56);
        backward(weighted_sum(reshape(slice_rows(x, 1, 2), {1, 6}), w));
        auto fd = fd_gradient(x, [&] {
            RngState w2(56);
            return weighted_sum(reshape(slice_rows(x, 1, 2), {1, 6}), w2).item();
        });
        CHECK(max_rel_err(x.grad(), fd) < 1e-6);
    }
    SUBCASE("scalar multiply") {
        Tensor x = random_tensor({5}, rng);
        backward(sum(scale(x, -2.5)));
        for (double g : x.grad()) CHECK(g == -2.5);
    }
}

TEST_CASE("no-grad guard suppresses graph construction") {
    Tensor x = Tensor::leaf({2}, {1, 2}, true);
    NoGradGuard guard;
    Tensor y = sum(mul(x, x));
    CHECK_FALSE(y.requires_grad());
}

TEST_SUITE_END();
