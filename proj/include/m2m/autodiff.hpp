#pragma once

// Reverse-mode automatic differentiation on dense double matrices. The tape is
// implicit: every operation returns a node holding its value, its parent
// links, and a closure that routes the node's gradient into the parents.
// Gradients accumulate (+=) into node grad slots; backward() zeroes interior
// grads but leaves leaf grads alone, so repeated backward calls add up until
// the caller resets them.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "m2m/common.hpp"

namespace m2m::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Mat value;
    Mat grad;  // empty until needed
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat::Zero(value.rows(), value.cols());
    }
};

inline Var constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

inline Var leaf(Mat v) {  // trainable parameter
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

namespace detail {

inline void accum(Node& p, const Mat& g) {
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad += g;
}

inline Var make(Mat value, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(back);
    }
    return n;
}

}  // namespace detail

// ---- arithmetic ----

inline Var add(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("ad::add: shape mismatch");
    return detail::make(a->value + b->value, {a, b}, [a = a.get(), b = b.get()](Node& n) {
        detail::accum(*a, n.grad);
        detail::accum(*b, n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("ad::sub: shape mismatch");
    return detail::make(a->value - b->value, {a, b}, [a = a.get(), b = b.get()](Node& n) {
        detail::accum(*a, n.grad);
        detail::accum(*b, -n.grad);
    });
}

inline Var neg(const Var& a) {
    return detail::make(-a->value, {a}, [a = a.get()](Node& n) { detail::accum(*a, -n.grad); });
}

inline Var mul(const Var& a, const Var& b) {  // elementwise
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("ad::mul: shape mismatch");
    return detail::make(a->value.cwiseProduct(b->value), {a, b},
                        [a = a.get(), b = b.get()](Node& n) {
                            detail::accum(*a, n.grad.cwiseProduct(b->value));
                            detail::accum(*b, n.grad.cwiseProduct(a->value));
                        });
}

inline Var div(const Var& a, const Var& b) {  // elementwise
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("ad::div: shape mismatch");
    return detail::make(a->value.cwiseQuotient(b->value), {a, b},
                        [a = a.get(), b = b.get()](Node& n) {
                            detail::accum(*a, n.grad.cwiseQuotient(b->value));
                            detail::accum(*b, (-n.grad.array() * a->value.array() /
                                               b->value.array().square())
                                                  .matrix());
                        });
}

inline Var scalar_mul(const Var& a, double s) {
    return detail::make(a->value * s, {a},
                        [a = a.get(), s](Node& n) { detail::accum(*a, n.grad * s); });
}

inline Var scalar_add(const Var& a, double s) {
    return detail::make((a->value.array() + s).matrix(), {a},
                        [a = a.get()](Node& n) { detail::accum(*a, n.grad); });
}

inline Var matmul(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.rows()) throw ShapeError("ad::matmul: inner dim mismatch");
    return detail::make(a->value * b->value, {a, b}, [a = a.get(), b = b.get()](Node& n) {
        detail::accum(*a, n.grad * b->value.transpose());
        detail::accum(*b, a->value.transpose() * n.grad);
    });
}

inline Var transpose(const Var& a) {
    return detail::make(a->value.transpose(), {a},
                        [a = a.get()](Node& n) { detail::accum(*a, n.grad.transpose()); });
}

// ---- elementwise nonlinearities ----

inline Var exp(const Var& a) {
    Mat out = a->value.array().exp();
    return detail::make(out, {a}, [a = a.get(), out](Node& n) {
        detail::accum(*a, n.grad.cwiseProduct(out));
    });
}

inline Var log(const Var& a) {
    return detail::make(a->value.array().log().matrix(), {a}, [a = a.get()](Node& n) {
        detail::accum(*a, n.grad.cwiseQuotient(a->value));
    });
}

inline Var sin(const Var& a) {
    return detail::make(a->value.array().sin().matrix(), {a}, [a = a.get()](Node& n) {
        detail::accum(*a, n.grad.cwiseProduct(a->value.array().cos().matrix()));
    });
}

inline Var cos(const Var& a) {
    return detail::make(a->value.array().cos().matrix(), {a}, [a = a.get()](Node& n) {
        detail::accum(*a, -n.grad.cwiseProduct(a->value.array().sin().matrix()));
    });
}

inline Var sqrt(const Var& a) {
    Mat out = a->value.array().sqrt();
    return detail::make(out, {a}, [a = a.get(), out](Node& n) {
        detail::accum(*a, (n.grad.array() / (2.0 * out.array())).matrix());
    });
}

inline Var gelu(const Var& a) {  // exact form x * Phi(x)
    auto phi_cdf = [](double x) { return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)); };
    Mat out = a->value.unaryExpr([&](double x) { return x * phi_cdf(x); });
    return detail::make(out, {a}, [a = a.get(), phi_cdf](Node& n) {
        Mat d = a->value.unaryExpr([&](double x) {
            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            return phi_cdf(x) + x * pdf;
        });
        detail::accum(*a, n.grad.cwiseProduct(d));
    });
}

inline Var silu(const Var& a) {  // x * sigmoid(x)
    Mat sig = a->value.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    return detail::make(a->value.cwiseProduct(sig), {a}, [a = a.get(), sig](Node& n) {
        Mat d = sig.array() * (1.0 + a->value.array() * (1.0 - sig.array()));
        detail::accum(*a, n.grad.cwiseProduct(d));
    });
}

// Elementwise max against a constant; subgradient 0 on the flat side and at
// the kink.
inline Var cwise_max(const Var& a, double c) {
    return detail::make(a->value.cwiseMax(c), {a}, [a = a.get(), c](Node& n) {
        Mat mask = (a->value.array() > c).cast<double>();
        detail::accum(*a, n.grad.cwiseProduct(mask));
    });
}

// ---- row-structured ops ----

inline Var softmax_rows(const Var& a) {
    Mat z = a->value;
    Vec mx = z.rowwise().maxCoeff();
    Mat e = (z.colwise() - mx).array().exp();
    Vec s = e.rowwise().sum();
    Mat out = e.array().colwise() / s.array();
    return detail::make(out, {a}, [a = a.get(), out](Node& n) {
        Vec dot = (n.grad.cwiseProduct(out)).rowwise().sum();
        Mat g = out.cwiseProduct(n.grad.colwise() - dot);
        detail::accum(*a, g);
    });
}

inline Var layer_norm_rows(const Var& a, double eps = 1e-5) {
    Mat z = a->value;
    const double dim = static_cast<double>(z.cols());
    Vec mu = z.rowwise().mean();
    Mat centered = z.colwise() - mu;
    Vec var = centered.array().square().rowwise().sum() / dim;
    Vec inv_sd = (var.array() + eps).sqrt().inverse();
    Mat xhat = centered.array().colwise() * inv_sd.array();
    return detail::make(xhat, {a}, [a = a.get(), xhat, inv_sd, dim](Node& n) {
        Vec g_mean = n.grad.rowwise().mean();
        Vec gx_mean = n.grad.cwiseProduct(xhat).rowwise().sum() / dim;
        Mat inner = (n.grad.colwise() - g_mean) - (xhat.array().colwise() * gx_mean.array()).matrix();
        detail::accum(*a, (inner.array().colwise() * inv_sd.array()).matrix());
    });
}

// ---- reductions ----

inline Var sum(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->value.sum();
    return detail::make(out, {a}, [a = a.get()](Node& n) {
        detail::accum(*a, Mat::Constant(a->value.rows(), a->value.cols(), n.grad(0, 0)));
    });
}

inline Var mean(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->value.mean();
    return detail::make(out, {a}, [a = a.get()](Node& n) {
        double scale = n.grad(0, 0) / static_cast<double>(a->value.size());
        detail::accum(*a, Mat::Constant(a->value.rows(), a->value.cols(), scale));
    });
}

inline Var norm(const Var& a) {  // Frobenius; subgradient 0 at the origin
    Mat out(1, 1);
    out(0, 0) = a->value.norm();
    return detail::make(out, {a}, [a = a.get(), v = out(0, 0)](Node& n) {
        if (v > 0.0) detail::accum(*a, (n.grad(0, 0) / v) * a->value);
    });
}

// ---- broadcasts, slicing, concatenation ----

inline Var add_rowvec(const Var& m, const Var& v) {  // v is 1 x cols
    if (v->value.rows() != 1 || v->value.cols() != m->value.cols())
        throw ShapeError("ad::add_rowvec: v must be 1 x cols(m)");
    Mat out = m->value.rowwise() + v->value.row(0);
    return detail::make(out, {m, v}, [m = m.get(), v = v.get()](Node& n) {
        detail::accum(*m, n.grad);
        detail::accum(*v, n.grad.colwise().sum());
    });
}

inline Var mul_rowvec(const Var& m, const Var& v) {
    if (v->value.rows() != 1 || v->value.cols() != m->value.cols())
        throw ShapeError("ad::mul_rowvec: v must be 1 x cols(m)");
    Mat out = m->value.array().rowwise() * v->value.row(0).array();
    return detail::make(out, {m, v}, [m = m.get(), v = v.get()](Node& n) {
        detail::accum(*m, (n.grad.array().rowwise() * v->value.row(0).array()).matrix());
        detail::accum(*v, n.grad.cwiseProduct(m->value).colwise().sum());
    });
}

inline Var repeat_row(const Var& v, Eigen::Index rows) {  // v is 1 x k
    if (v->value.rows() != 1) throw ShapeError("ad::repeat_row: v must be a row vector");
    return detail::make(v->value.replicate(rows, 1), {v}, [v = v.get()](Node& n) {
        detail::accum(*v, n.grad.colwise().sum());
    });
}

inline Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index len) {
    if (c0 < 0 || len < 1 || c0 + len > a->value.cols())
        throw ShapeError("ad::slice_cols: range out of bounds");
    return detail::make(a->value.middleCols(c0, len), {a}, [a = a.get(), c0, len](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.middleCols(c0, len) += n.grad;
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("ad::concat_cols: empty");
    Eigen::Index rows = parts[0]->value.rows(), cols = 0;
    for (const auto& p : parts) {
        if (p->value.rows() != rows) throw ShapeError("ad::concat_cols: row mismatch");
        cols += p->value.cols();
    }
    Mat out(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p->value.cols()) = p->value;
        off += p->value.cols();
    }
    std::vector<Var> parents = parts;
    return detail::make(out, parents, [parts](Node& n) {
        Eigen::Index off = 0;
        for (const auto& p : parts) {
            detail::accum(*p, n.grad.middleCols(off, p->value.cols()));
            off += p->value.cols();
        }
    });
}

// ---- pairwise distances (for kernel losses) ----

inline Var pairwise_sqdist(const Var& a, const Var& b) {  // out_ij = ||a_i - b_j||^2
    if (a->value.cols() != b->value.cols()) throw ShapeError("ad::pairwise_sqdist: dim mismatch");
    Mat out = (a->value.rowwise().squaredNorm().replicate(1, b->value.rows()) +
               b->value.rowwise().squaredNorm().transpose().replicate(a->value.rows(), 1) -
               2.0 * a->value * b->value.transpose())
                  .cwiseMax(0.0);
    return detail::make(out, {a, b}, [a = a.get(), b = b.get()](Node& n) {
        Vec ra = n.grad.rowwise().sum();
        Vec rb = n.grad.colwise().sum().transpose();
        detail::accum(*a, 2.0 * ((a->value.array().colwise() * ra.array()).matrix() -
                                 n.grad * b->value));
        detail::accum(*b, 2.0 * ((b->value.array().colwise() * rb.array()).matrix() -
                                 n.grad.transpose() * a->value));
    });
}

inline Var pairwise_dist(const Var& a, const Var& b) {  // out_ij = ||a_i - b_j||
    Var sq = pairwise_sqdist(a, b);
    Mat out = sq->value.cwiseSqrt();
    // Dedicated node instead of sqrt(sq): the subgradient at coincident points
    // is defined as 0, which plain sqrt backward (1/2sqrt) cannot express.
    return detail::make(out, {a, b}, [a = a.get(), b = b.get(), out](Node& n) {
        Mat w = (out.array() > 0.0).select(n.grad.array() / out.array(), 0.0);
        Vec ra = w.rowwise().sum();
        Vec rb = w.colwise().sum().transpose();
        detail::accum(*a, (a->value.array().colwise() * ra.array()).matrix() - w * b->value);
        detail::accum(*b, (b->value.array().colwise() * rb.array()).matrix() - w.transpose() * a->value);
    });
}

// ---- stochastic ----

// Inverted dropout: kept entries scale by 1/(1-rate) so eval needs no
// rescaling. Identity in eval mode or at rate 0.
inline Var dropout(const Var& a, double rate, bool train_mode, Rng* rng) {
    if (!train_mode || rate <= 0.0) return a;
    if (rate >= 1.0) throw ValueError("ad::dropout: rate must be < 1");
    if (rng == nullptr) throw ValueError("ad::dropout: train mode needs an rng");
    Mat mask(a->value.rows(), a->value.cols());
    const double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
        for (Eigen::Index j = 0; j < mask.cols(); ++j)
            mask(i, j) = rng->uniform01() < keep ? 1.0 / keep : 0.0;
    return detail::make(a->value.cwiseProduct(mask), {a}, [a = a.get(), mask](Node& n) {
        detail::accum(*a, n.grad.cwiseProduct(mask));
    });
}

// ---- backward ----

// Reverse-mode sweep from a scalar loss. Interior grads are zeroed first;
// leaf grads accumulate across calls until explicitly reset.
inline void backward(const Var& loss) {
    if (loss->value.rows() != 1 || loss->value.cols() != 1)
        throw ValueError("ad::backward: loss must be a 1x1 scalar");
    std::vector<Node*> order;  // post-order: ancestors before descendants
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Frame> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    for (Node* n : order)
        if (!n->parents.empty()) {
            n->ensure_grad();
            n->grad.setZero();
        }
    loss->ensure_grad();
    loss->grad(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->requires_grad && n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

}  // namespace m2m::ad
