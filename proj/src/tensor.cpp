#include "mspnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "mspnet/kernels.hpp"

namespace mspnet {

namespace detail {

namespace {
thread_local bool t_grad_enabled = true;

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(std::vector<int> shape, const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign((std::size_t)n->numel(), 0.0);
    n->op = op;
    return n;
}

bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!t_grad_enabled) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got shape " +
                         shape_str(t.shape()));
}

} // namespace

bool grad_enabled() { return t_grad_enabled; }

} // namespace detail

using detail::Node;
using detail::make_node;
using detail::shape_str;
using detail::want_grad;

NoGradGuard::NoGradGuard() : prev_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = prev_; }

// --- construction ----------------------------------------------------------

Tensor Tensor::leaf(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    for (int e : n->shape)
        if (e <= 0) throw ShapeError("leaf: non-positive extent in shape " + shape_str(n->shape));
    if ((long long)values.size() != n->numel())
        throw ShapeError("leaf: value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(n->shape));
    n->value = std::move(values);
    n->grad.assign(n->value.size(), 0.0);
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    long long c = 1;
    for (int e : shape) c *= e;
    return leaf(std::move(shape), std::vector<double>((std::size_t)c, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    long long c = 1;
    for (int e : shape) c *= e;
    return leaf(std::move(shape), std::vector<double>((std::size_t)c, v), requires_grad);
}

Tensor Tensor::scalar(double v) { return leaf({1}, {v}, false); }

Tensor Tensor::identity(int d) {
    std::vector<double> v((std::size_t)d * d, 0.0);
    for (int i = 0; i < d; ++i) v[(std::size_t)i * d + i] = 1.0;
    return leaf({d, d}, std::move(v), false);
}

double Tensor::item() const {
    if (numel() != 1)
        throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return n_->value[0];
}

// --- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_rank2(a, "matmul");
    detail::check_rank2(b, "matmul");
    const int r = a.dim(0), s = a.dim(1), t = b.dim(1);
    if (b.dim(0) != s)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
    auto out = make_node({r, t}, "matmul");
    kernels::matmul(a.values().data(), b.values().data(), out->value.data(), r, s, t);
    if (want_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.handle(), b.handle()};
        auto an = a.handle();
        auto bn = b.handle();
        out->backprop = [an, bn, r, s, t](Node& self) {
            if (an->requires_grad)
                kernels::matmul_acc_gbt(self.grad.data(), bn->value.data(), an->grad.data(), r, s, t);
            if (bn->requires_grad)
                kernels::matmul_acc_atg(an->value.data(), self.grad.data(), bn->grad.data(), r, s, t);
        };
    }
    return Tensor::wrap(out);
}

// --- elementwise -------------------------------------------------------------

Tensor relu(const Tensor& x) {
    auto out = make_node(x.shape(), "relu");
    const auto& xv = x.values();
    const long long n = x.numel();
    mspnet::par_for(n, n, [&](long long i) { out->value[(std::size_t)i] = xv[(std::size_t)i] > 0.0 ? xv[(std::size_t)i] : 0.0; });
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn, n](Node& self) {
            mspnet::par_for(n, n, [&](long long i) {
                if (xn->value[(std::size_t)i] > 0.0) xn->grad[(std::size_t)i] += self.grad[(std::size_t)i];
            });
        };
    }
    return Tensor::wrap(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
    const bool rowcast = a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1);
    if (!rowcast && a.shape() != b.shape())
        throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are neither equal nor row-broadcastable");
    auto out = make_node(a.shape(), "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    if (rowcast) {
        const int rows = a.dim(0), cols = a.dim(1);
        mspnet::par_for(rows, (long long)rows * cols, [&](long long i) {
            for (int j = 0; j < cols; ++j)
                out->value[(std::size_t)i * cols + j] = av[(std::size_t)i * cols + j] + bv[(std::size_t)j];
        });
    } else {
        for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
    }
    if (want_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.handle(), b.handle()};
        auto an = a.handle();
        auto bn = b.handle();
        out->backprop = [an, bn, rowcast](Node& self) {
            if (an->requires_grad) {
                const long long n = (long long)an->grad.size();
                mspnet::par_for(n, n, [&](long long i) { an->grad[(std::size_t)i] += self.grad[(std::size_t)i]; });
            }
            if (bn->requires_grad) {
                if (rowcast) {
                    const int cols = (int)bn->value.size();
                    const int rows = self.shape[0];
                    std::vector<double> sums((std::size_t)cols);
                    kernels::column_sums(self.grad.data(), rows, cols, sums.data());
                    for (int j = 0; j < cols; ++j) bn->grad[(std::size_t)j] += sums[(std::size_t)j];
                } else {
                    for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += self.grad[i];
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    auto out = make_node(a.shape(), "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
    if (want_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.handle(), b.handle()};
        auto an = a.handle();
        auto bn = b.handle();
        out->backprop = [an, bn](Node& self) {
            if (an->requires_grad)
                for (std::size_t i = 0; i < an->grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->value[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < bn->grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->value[i];
        };
    }
    return Tensor::wrap(out);
}

Tensor scale(const Tensor& x, double c) {
    auto out = make_node(x.shape(), "scale");
    const auto& xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * c;
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn, c](Node& self) {
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
        };
    }
    return Tensor::wrap(out);
}

Tensor sum(const Tensor& x) {
    auto out = make_node({1}, "sum");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    out->value[0] = acc;
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn](Node& self) {
            const double g = self.grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        };
    }
    return Tensor::wrap(out);
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    long long c = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("reshape: non-positive extent");
        c *= e;
    }
    if (c != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto out = make_node(std::move(shape), "reshape");
    out->value = x.values();
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn](Node& self) {
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[i];
        };
    }
    return Tensor::wrap(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    for (const Tensor& p : parts) detail::check_rank2(p, "concat");
    const int other = axis == 0 ? parts[0].dim(1) : parts[0].dim(0);
    int total = 0;
    for (const Tensor& p : parts) {
        const int fixed = axis == 0 ? p.dim(1) : p.dim(0);
        if (fixed != other)
            throw ShapeError("concat: extent mismatch along the fixed axis, " +
                             shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += axis == 0 ? p.dim(0) : p.dim(1);
    }
    const std::vector<int> oshape = axis == 0 ? std::vector<int>{total, other}
                                              : std::vector<int>{other, total};
    auto out = make_node(oshape, "concat");
    if (axis == 0) {
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            std::memcpy(out->value.data() + off, p.values().data(), p.values().size() * sizeof(double));
            off += p.values().size();
        }
    } else {
        int coloff = 0;
        for (const Tensor& p : parts) {
            const int pc = p.dim(1);
            for (int i = 0; i < other; ++i)
                std::memcpy(out->value.data() + (std::size_t)i * total + coloff,
                            p.values().data() + (std::size_t)i * pc, (std::size_t)pc * sizeof(double));
            coloff += pc;
        }
    }
    bool any = false;
    if (detail::grad_enabled())
        for (const Tensor& p : parts) any = any || p.requires_grad();
    if (any) {
        out->requires_grad = true;
        std::vector<std::shared_ptr<Node>> ps;
        ps.reserve(parts.size());
        for (const Tensor& p : parts) ps.push_back(p.handle());
        out->parents = ps;
        out->backprop = [ps, axis, total](Node& self) {
            if (axis == 0) {
                std::size_t off = 0;
                for (auto& p : ps) {
                    const std::size_t count = (std::size_t)p->numel();
                    if (p->requires_grad)
                        for (std::size_t i = 0; i < count; ++i) p->grad[i] += self.grad[off + i];
                    off += count;
                }
            } else {
                const int rows = self.shape[0];
                int coloff = 0;
                for (auto& p : ps) {
                    const int pc = p->shape[1];
                    if (p->requires_grad)
                        for (int i = 0; i < rows; ++i)
                            for (int j = 0; j < pc; ++j)
                                p->grad[(std::size_t)i * pc + j] +=
                                    self.grad[(std::size_t)i * total + coloff + j];
                    coloff += pc;
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    detail::check_rank2(x, "slice_rows");
    if (start < 0 || count < 1 || start + count > x.dim(0))
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
    const int cols = x.dim(1);
    auto out = make_node({count, cols}, "slice_rows");
    std::memcpy(out->value.data(), x.values().data() + (std::size_t)start * cols,
                (std::size_t)count * cols * sizeof(double));
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn, start, cols](Node& self) {
            const std::size_t off = (std::size_t)start * cols;
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[off + i] += self.grad[i];
        };
    }
    return Tensor::wrap(out);
}

Tensor max_over_points(const Tensor& x) {
    detail::check_rank2(x, "max_over_points");
    const int n = x.dim(0), k = x.dim(1);
    if (n < 1) throw ShapeError("max_over_points: empty input");
    auto out = make_node({k}, "max_over_points");
    std::vector<int> argmax((std::size_t)k, 0);
    for (int j = 0; j < k; ++j) {
        double best = x.at(0, j);
        int row = 0;
        for (int i = 1; i < n; ++i) {
            const double v = x.at(i, j);
            if (v > best) { // strict: ties stay on the first-occurring row
                best = v;
                row = i;
            }
        }
        out->value[(std::size_t)j] = best;
        argmax[(std::size_t)j] = row;
    }
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn, argmax, k](Node& self) {
            for (int j = 0; j < k; ++j)
                xn->grad[(std::size_t)argmax[(std::size_t)j] * k + j] += self.grad[(std::size_t)j];
        };
    }
    return Tensor::wrap(out);
}

Tensor dropout(const Tensor& x, double keep_prob, Mode mode, RngState& rng) {
    if (!(keep_prob > 0.0 && keep_prob <= 1.0))
        throw ValueError("dropout: keep_prob " + std::to_string(keep_prob) + " outside (0, 1]");
    if (mode == Mode::infer || keep_prob == 1.0) return x;
    auto out = make_node(x.shape(), "dropout");
    const auto& xv = x.values();
    const double inv = 1.0 / keep_prob;
    std::vector<char> mask(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = rng.uniform() < keep_prob ? 1 : 0;
        out->value[i] = mask[i] ? xv[i] * inv : 0.0;
    }
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.handle()};
        auto xn = x.handle();
        out->backprop = [xn, mask = std::move(mask), inv](Node& self) {
            for (std::size_t i = 0; i < xn->grad.size(); ++i)
                if (mask[i]) xn->grad[i] += self.grad[i] * inv;
        };
    }
    return Tensor::wrap(out);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    detail::check_rank2(logits, "softmax_cross_entropy");
    const int b = logits.dim(0), c = logits.dim(1);
    if ((int)labels.size() != b)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(b));
    for (int i = 0; i < b; ++i)
        if (labels[(std::size_t)i] < 0 || labels[(std::size_t)i] >= c)
            throw ValueError("softmax_cross_entropy: label " + std::to_string(labels[(std::size_t)i]) +
                             " outside [0, " + std::to_string(c) + ")");
    auto out = make_node({1}, "softmax_cross_entropy");
    std::vector<double> probs((std::size_t)b * c);
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        const double* row = logits.values().data() + (std::size_t)i * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double logz = mx + std::log(z);
        for (int j = 0; j < c; ++j) probs[(std::size_t)i * c + j] = std::exp(row[j] - logz);
        loss += logz - row[labels[(std::size_t)i]];
    }
    out->value[0] = loss / b;
    if (want_grad({&logits})) {
        out->requires_grad = true;
        out->parents = {logits.handle()};
        auto ln = logits.handle();
        std::vector<int> lab(labels.begin(), labels.end());
        out->backprop = [ln, probs = std::move(probs), lab = std::move(lab), b, c](Node& self) {
            const double g = self.grad[0] / b;
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < c; ++j) {
                    const double onehot = j == lab[(std::size_t)i] ? 1.0 : 0.0;
                    ln->grad[(std::size_t)i * c + j] += g * (probs[(std::size_t)i * c + j] - onehot);
                }
        };
    }
    return Tensor::wrap(out);
}

Tensor mse(const Tensor& pred, std::span<const double> target) {
    const long long n = pred.numel();
    if ((long long)target.size() != n)
        throw ShapeError("mse: " + std::to_string(target.size()) + " targets for " +
                         std::to_string(n) + " predictions");
    auto out = make_node({1}, "mse");
    double acc = 0.0;
    for (long long i = 0; i < n; ++i) {
        const double d = pred.values()[(std::size_t)i] - target[(std::size_t)i];
        acc += d * d;
    }
    out->value[0] = acc / n;
    if (want_grad({&pred})) {
        out->requires_grad = true;
        out->parents = {pred.handle()};
        auto pn = pred.handle();
        std::vector<double> tg(target.begin(), target.end());
        out->backprop = [pn, tg = std::move(tg), n](Node& self) {
            const double g = self.grad[0] * 2.0 / n;
            for (long long i = 0; i < n; ++i)
                pn->grad[(std::size_t)i] += g * (pn->value[(std::size_t)i] - tg[(std::size_t)i]);
        };
    }
    return Tensor::wrap(out);
}

Tensor ortho_regularizer(const Tensor& t) {
    detail::check_rank2(t, "ortho_regularizer");
    const int k = t.dim(0);
    if (t.dim(1) != k)
        throw ShapeError("ortho_regularizer: matrix " + shape_str(t.shape()) + " is not square");
    // E = I - T T^T, loss = sum E^2, dL/dT = -4 E T (E symmetric).
    std::vector<double> e((std::size_t)k * k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += t.at(i, l) * t.at(j, l);
            e[(std::size_t)i * k + j] = (i == j ? 1.0 : 0.0) - acc;
        }
    double loss = 0.0;
    for (double v : e) loss += v * v;
    auto out = make_node({1}, "ortho_regularizer");
    out->value[0] = loss;
    if (want_grad({&t})) {
        out->requires_grad = true;
        out->parents = {t.handle()};
        auto tn = t.handle();
        out->backprop = [tn, e = std::move(e), k](Node& self) {
            const double g = self.grad[0];
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    double acc = 0.0;
                    for (int l = 0; l < k; ++l)
                        acc += e[(std::size_t)i * k + l] * tn->value[(std::size_t)l * k + j];
                    tn->grad[(std::size_t)i * k + j] += g * -4.0 * acc;
                }
        };
    }
    return Tensor::wrap(out);
}

// --- batch norm ---------------------------------------------------------------

BatchNorm::BatchNorm(int features_)
    : gamma(Tensor::full({features_}, 1.0, true)),
      beta(Tensor::zeros({features_}, true)),
      running_mean((std::size_t)features_, 0.0),
      running_var((std::size_t)features_, 1.0),
      features(features_) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
    detail::check_rank2(x, "batch_norm");
    const int rows = x.dim(0), cols = x.dim(1);
    if (cols != features)
        throw ShapeError("batch_norm: input has " + std::to_string(cols) + " features, layer has " +
                         std::to_string(features));
    if (mode == Mode::train && rows < 2)
        throw ValueError("batch_norm: train mode needs a batch of at least 2 rows, got " +
                         std::to_string(rows));

    std::vector<double> mean((std::size_t)cols), var((std::size_t)cols);
    if (mode == Mode::train) {
        kernels::column_mean_var(x.values().data(), rows, cols, mean.data(), var.data());
        for (int j = 0; j < cols; ++j) {
            running_mean[(std::size_t)j] = momentum * running_mean[(std::size_t)j] + (1.0 - momentum) * mean[(std::size_t)j];
            running_var[(std::size_t)j] = momentum * running_var[(std::size_t)j] + (1.0 - momentum) * var[(std::size_t)j];
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    std::vector<double> invstd((std::size_t)cols);
    for (int j = 0; j < cols; ++j) invstd[(std::size_t)j] = 1.0 / std::sqrt(var[(std::size_t)j] + eps);

    auto out = make_node({rows, cols}, "batch_norm");
    std::vector<double> xhat((std::size_t)rows * cols);
    mspnet::par_for(rows, (long long)rows * cols, [&](long long i) {
        for (int j = 0; j < cols; ++j) {
            const std::size_t idx = (std::size_t)i * cols + j;
            xhat[idx] = (x.values()[idx] - mean[(std::size_t)j]) * invstd[(std::size_t)j];
            out->value[idx] = gamma.values()[(std::size_t)j] * xhat[idx] + beta.values()[(std::size_t)j];
        }
    });

    if (want_grad({&x, &gamma, &beta})) {
        out->requires_grad = true;
        out->parents = {x.handle(), gamma.handle(), beta.handle()};
        auto xn = x.handle();
        auto gn = gamma.handle();
        auto bn = beta.handle();
        const bool train = mode == Mode::train;
        out->backprop = [xn, gn, bn, xhat = std::move(xhat), invstd = std::move(invstd), rows, cols,
                         train](Node& self) {
            std::vector<double> dgamma((std::size_t)cols), dbeta((std::size_t)cols);
            kernels::column_weighted_sums(self.grad.data(), xhat.data(), rows, cols, dgamma.data());
            kernels::column_sums(self.grad.data(), rows, cols, dbeta.data());
            if (gn->requires_grad)
                for (int j = 0; j < cols; ++j) gn->grad[(std::size_t)j] += dgamma[(std::size_t)j];
            if (bn->requires_grad)
                for (int j = 0; j < cols; ++j) bn->grad[(std::size_t)j] += dbeta[(std::size_t)j];
            if (!xn->requires_grad) return;
            if (train) {
                // dxhat = g_out * gamma; the mean/var paths fold into the
                // per-column sums.
                mspnet::par_for(rows, (long long)rows * cols, [&](long long i) {
                    for (int j = 0; j < cols; ++j) {
                        const std::size_t idx = (std::size_t)i * cols + j;
                        const double g = gn->value[(std::size_t)j];
                        const double dxhat = self.grad[idx] * g;
                        xn->grad[idx] += invstd[(std::size_t)j] *
                                         (dxhat - dbeta[(std::size_t)j] * g / rows -
                                          xhat[idx] * dgamma[(std::size_t)j] * g / rows);
                    }
                });
            } else {
                mspnet::par_for(rows, (long long)rows * cols, [&](long long i) {
                    for (int j = 0; j < cols; ++j) {
                        const std::size_t idx = (std::size_t)i * cols + j;
                        xn->grad[idx] += self.grad[idx] * gn->value[(std::size_t)j] * invstd[(std::size_t)j];
                    }
                });
            }
        };
    }
    return Tensor::wrap(out);
}

// --- backward ----------------------------------------------------------------

void backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1)
        throw ShapeError("backward: root must be a defined scalar tensor");
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node(), 0});
    visited.insert(root.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    // Interior grads are scratch space for this pass; only leaves accumulate
    // across calls.
    for (Node* n : order)
        if (n->backprop) n->grad.assign((std::size_t)n->numel(), 0.0);
    root.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

} // namespace mspnet
