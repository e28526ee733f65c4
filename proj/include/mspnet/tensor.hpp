#pragma once
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mspnet/errors.hpp"
#include "mspnet/rng.hpp"

// Reverse-mode autodiff over dense 64-bit tensors. A Tensor is a shared
// handle to a graph node; every op records how to push its output gradient
// into its inputs. backward() on a scalar root fills the grad buffers of all
// requires-grad leaves; repeated calls accumulate.

namespace mspnet {

enum class Mode { train, infer };

namespace detail {

struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    // Allocated on first use (ensure_grad); transient inference tensors never
    // pay for it. Observably the grad is always a zero-initialized array of
    // the tensor's shape.
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    long long numel() const {
        long long n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    std::vector<double>& ensure_grad() {
        if ((long long)grad.size() != numel()) grad.assign((std::size_t)numel(), 0.0);
        return grad;
    }
};

bool grad_enabled();

} // namespace detail

// Disables graph recording for its scope (thread-local). Inference paths use
// this so concurrent forward passes never touch shared state.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor leaf(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor identity(int d);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int rank() const { return (int)n_->shape.size(); }
    int dim(int i) const { return n_->shape[(std::size_t)i]; }
    long long numel() const { return n_->numel(); }
    bool requires_grad() const { return n_->requires_grad; }

    std::vector<double>& values() { return n_->value; }
    const std::vector<double>& values() const { return n_->value; }
    std::vector<double>& grad() { return n_->ensure_grad(); }
    const std::vector<double>& grad() const { return n_->ensure_grad(); }

    double item() const;
    double at(int i, int j) const { return n_->value[(std::size_t)i * dim(1) + j]; }
    double& at(int i, int j) { return n_->value[(std::size_t)i * dim(1) + j]; }

    void zero_grad() { n_->grad.assign((std::size_t)n_->numel(), 0.0); }

    detail::Node* node() const { return n_.get(); }
    std::shared_ptr<detail::Node> handle() const { return n_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> n_;
};

// --- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
// Same-shape elementwise add, or row broadcast [n x k] + [k].
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise, same shape
Tensor scale(const Tensor& x, double c);
Tensor sum(const Tensor& x); // -> [1]
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis); // rank-2, axis 0 or 1
Tensor slice_rows(const Tensor& x, int start, int count);  // rank-2
// Columnwise max of [n x k] -> [k]; gradient goes to the first argmax row.
Tensor max_over_points(const Tensor& x);
// Inverted dropout: train mode zeroes with prob 1-keep_prob and scales
// survivors by 1/keep_prob; infer mode (and keep_prob == 1) is identity.
// The mask is drawn from `rng` in row-major element order.
Tensor dropout(const Tensor& x, double keep_prob, Mode mode, RngState& rng);
// Mean over rows of -log softmax(logits)[label]; max-stabilized.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor mse(const Tensor& pred, std::span<const double> target);
// Squared Frobenius norm of (I - T T^T).
Tensor ortho_regularizer(const Tensor& t);

void backward(const Tensor& root);

// Per-feature batch normalization over the row axis of [rows x features].
// Train mode normalizes by batch statistics (biased variance, eps 1e-5) and
// folds them into the running estimates as
//   running = momentum * running + (1 - momentum) * batch,  momentum 0.9.
// Infer mode normalizes by the running estimates.
class BatchNorm {
public:
    BatchNorm() = default;
    explicit BatchNorm(int features);

    Tensor forward(const Tensor& x, Mode mode);

    Tensor gamma, beta; // [features], trainable
    std::vector<double> running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.9;
    int features = 0;
};

} // namespace mspnet
