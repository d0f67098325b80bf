/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Minimal reverse-mode differentiation over dense matrices. Only the prompt
// parameters are ever trained; frozen tower weights enter graphs as plain
// matrices, so ops that take `const Matrix&` arguments do not propagate
// gradients into them. Those matrices are held by reference and must
// outlive any backward() call on the graph.

#include "zsad/core.hpp"
#include "zsad/image_ops.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace zsad::ag {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g)
    {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    const Matrix& value() const { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double scalar() const { return node_->value(0, 0); }
    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

inline Var parameter(Matrix value)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

/// Builds a result node. `fn` receives the output node and pushes gradients
/// into whichever parents require them.
inline Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        n->requires_grad = n->requires_grad || p.requires_grad();
        n->parents.push_back(p.ptr());
    }
    if (n->requires_grad) {
        n->backward = std::move(fn);
    }
    return Var(std::move(n));
}

inline void push(const Var& v, const Matrix& g)
{
    if (v.requires_grad()) {
        v.node().accumulate(g);
    }
}

/// Runs reverse accumulation from a 1x1 root.
inline void backward(const Var& root)
{
    if (root.rows() != 1 || root.cols() != 1) {
        throw ConfigError("backward() requires a scalar root, got " + shape_str(root.value()));
    }
    if (!root.requires_grad()) {
        return;
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
    seen.insert(&root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node().accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() > 0) {
            n->backward(*n);
        }
    }
}

inline Var matmul(const Var& a, const Var& b)
{
    if (a.cols() != b.rows()) {
        throw ConfigError("matmul shape mismatch " + shape_str(a.value()) + " * " + shape_str(b.value()));
    }
    return make_op(a.value() * b.value(), {a, b}, [a, b](Node& out) {
        push(a, out.grad * b.value().transpose());
        push(b, a.value().transpose() * out.grad);
    });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b)
{
    if (a.cols() != b.cols()) {
        throw ConfigError("matmul_nt shape mismatch " + shape_str(a.value()) + " * T" + shape_str(b.value()));
    }
    return make_op(a.value() * b.value().transpose(), {a, b}, [a, b](Node& out) {
        push(a, out.grad * b.value());
        push(b, out.grad.transpose() * a.value());
    });
}

inline Var add(const Var& a, const Var& b)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ConfigError("add shape mismatch " + shape_str(a.value()) + " + " + shape_str(b.value()));
    }
    return make_op(a.value() + b.value(), {a, b}, [a, b](Node& out) {
        push(a, out.grad);
        push(b, out.grad);
    });
}

/// a + broadcast(row) where row is 1 x cols.
inline Var add_row(const Var& a, const Var& row)
{
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ConfigError("add_row shape mismatch " + shape_str(a.value()) + " + " + shape_str(row.value()));
    }
    Matrix v = a.value();
    v.rowwise() += row.value().row(0);
    return make_op(std::move(v), {a, row}, [a, row](Node& out) {
        push(a, out.grad);
        push(row, out.grad.colwise().sum());
    });
}

inline Var scale(const Var& a, double s)
{
    return make_op(a.value() * s, {a}, [a, s](Node& out) { push(a, out.grad * s); });
}

/// x W^T + b with frozen W (out x in) and b (1 x out, may be empty).
inline Var linear(const Var& x, const Matrix& w, const Matrix& b)
{
    Matrix v = x.value() * w.transpose();
    if (b.size() > 0) {
        v.rowwise() += b.row(0);
    }
    return make_op(std::move(v), {x}, [x, &w](Node& out) { push(x, out.grad * w); });
}

/// x P with frozen P (in x out).
inline Var project(const Var& x, const Matrix& p)
{
    return make_op(x.value() * p, {x}, [x, &p](Node& out) { push(x, out.grad * p.transpose()); });
}

inline Var layer_norm(const Var& x, const Matrix& gamma, const Matrix& beta, double eps = 1e-5)
{
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Matrix xhat(n, d);
    Vector inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.value().row(i).mean();
        const double var = (x.value().row(i).array() - mean).square().sum() / static_cast<double>(d);
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = ((x.value().row(i).array() - mean) * inv_std(i)).matrix();
    }
    Matrix v = xhat;
    if (gamma.size() > 0) {
        v.array().rowwise() *= gamma.row(0).array();
    }
    if (beta.size() > 0) {
        v.rowwise() += beta.row(0);
    }
    return make_op(std::move(v), {x}, [x, xhat, inv_std, &gamma](Node& out) {
        Matrix dxhat = out.grad;
        if (gamma.size() > 0) {
            dxhat.array().rowwise() *= gamma.row(0).array();
        }
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const double m1 = dxhat.row(i).mean();
            const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(dxhat.cols());
            dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
        }
        push(x, dx);
    });
}

inline Var activation(const Var& x, Activation act)
{
    return make_op(zsad::activate(act, x.value()), {x}, [x, act](Node& out) {
        Matrix d = x.value().unaryExpr([act](double v) { return activate_grad(act, v); });
        push(x, out.grad.cwiseProduct(d));
    });
}

/// Row softmax; with `causal`, entry (i, j > i) is masked out.
inline Var softmax_rows(const Var& x, bool causal = false)
{
    Matrix logits = x.value();
    if (causal) {
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            for (Eigen::Index j = i + 1; j < logits.cols(); ++j) {
                logits(i, j) = -std::numeric_limits<double>::infinity();
            }
        }
    }
    Matrix y = zsad::softmax_rows(logits);
    return make_op(y, {x}, [x, y](Node& out) {
        Matrix dx(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const double dot = out.grad.row(i).dot(y.row(i));
            dx.row(i) = y.row(i).cwiseProduct((out.grad.row(i).array() - dot).matrix());
        }
        push(x, dx);
    });
}

/// Row log-softmax, stable for arbitrarily large logit gaps.
inline Var log_softmax_rows(const Var& x)
{
    const Matrix& v = x.value();
    Matrix y(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        const double lse = m + std::log((v.row(i).array() - m).exp().sum());
        y.row(i) = (v.row(i).array() - lse).matrix();
    }
    return make_op(y, {x}, [x, y](Node& out) {
        const Matrix p = y.array().exp().matrix();
        Matrix dx = out.grad;
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            dx.row(i) -= p.row(i) * out.grad.row(i).sum();
        }
        push(x, dx);
    });
}

inline Var exp(const Var& x)
{
    Matrix y = x.value().array().exp().matrix();
    return make_op(y, {x}, [x, y](Node& out) { push(x, out.grad.cwiseProduct(y)); });
}

inline Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index n)
{
    Matrix v = x.value().middleCols(start, n);
    return make_op(std::move(v), {x}, [x, start, n](Node& out) {
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g.middleCols(start, n) = out.grad;
        push(x, g);
    });
}

inline Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index n)
{
    Matrix v = x.value().middleRows(start, n);
    return make_op(std::move(v), {x}, [x, start, n](Node& out) {
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g.middleRows(start, n) = out.grad;
        push(x, g);
    });
}

inline Var hcat(const std::vector<Var>& parts)
{
    Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw ConfigError("hcat row mismatch");
        }
        cols += p.cols();
    }
    Matrix v(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        v.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return make_op(std::move(v), parts, [parts](Node& out) {
        Eigen::Index c0 = 0;
        for (const auto& p : parts) {
            push(p, out.grad.middleCols(c0, p.cols()));
            c0 += p.cols();
        }
    });
}

inline Var vcat(const std::vector<Var>& parts)
{
    Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ConfigError("vcat column mismatch");
        }
        rows += p.rows();
    }
    Matrix v(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return make_op(std::move(v), parts, [parts](Node& out) {
        Eigen::Index r0 = 0;
        for (const auto& p : parts) {
            push(p, out.grad.middleRows(r0, p.rows()));
            r0 += p.rows();
        }
    });
}

/// Copy of `base` with rows [start, start + src.rows()) replaced by `src`.
inline Var overwrite_rows(const Var& base, Eigen::Index start, const Var& src)
{
    if (src.cols() != base.cols() || start + src.rows() > base.rows()) {
        throw ConfigError("overwrite_rows out of range");
    }
    Matrix v = base.value();
    v.middleRows(start, src.rows()) = src.value();
    return make_op(std::move(v), {base, src}, [base, src, start](Node& out) {
        Matrix g = out.grad;
        g.middleRows(start, src.rows()).setZero();
        push(base, g);
        push(src, out.grad.middleRows(start, src.rows()));
    });
}

inline Var l2_normalize_rows(const Var& x)
{
    Matrix y(x.rows(), x.cols());
    Vector norms(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        norms(i) = x.value().row(i).norm();
        if (!(norms(i) > 0.0)) {
            throw DataError(detail::concat("zero-norm embedding at row ", i));
        }
        y.row(i) = x.value().row(i) / norms(i);
    }
    return make_op(y, {x}, [x, y, norms](Node& out) {
        Matrix dx(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const double dot = y.row(i).dot(out.grad.row(i));
            dx.row(i) = (out.grad.row(i) - y.row(i) * dot) / norms(i);
        }
        push(x, dx);
    });
}

inline Var sum(const Var& x)
{
    Matrix v(1, 1);
    v(0, 0) = x.value().sum();
    return make_op(std::move(v), {x}, [x](Node& out) {
        push(x, Matrix::Constant(x.rows(), x.cols(), out.grad(0, 0)));
    });
}

inline Var transpose(const Var& x)
{
    return make_op(x.value().transpose(), {x}, [x](Node& out) { push(x, out.grad.transpose()); });
}

/// Sum_i w_i z_i / Sum_i w_i for weights w (N x 1) and rows z (N x D).
/// Falls back to the unweighted mean (no gradient into w) when Sum w < guard.
inline Var weighted_row_mean(const Var& w, const Var& z, double guard = 1e-12)
{
    if (w.cols() != 1 || w.rows() != z.rows()) {
        throw ConfigError("weighted_row_mean shape mismatch " + shape_str(w.value()) + " vs " + shape_str(z.value()));
    }
    const double total = w.value().sum();
    if (total < guard) {
        const double n = static_cast<double>(z.rows());
        Matrix v = z.value().colwise().mean();
        return make_op(std::move(v), {z}, [z, n](Node& out) {
            push(z, out.grad.replicate(z.rows(), 1) / n);
        });
    }
    Matrix v = (w.value().transpose() * z.value()) / total;
    return make_op(v, {w, z}, [w, z, v, total](Node& out) {
        push(z, w.value() * out.grad / total);
        Matrix centred = z.value().rowwise() - v.row(0);
        push(w, centred * out.grad.transpose() / total);
    });
}

/// Bilinear resize of a map stored as (gh*gw) x C rows in row-major grid
/// order, producing (out_h*out_w) x C.
inline Var resize_bilinear_rows(const Var& x, int gh, int gw, int out_h, int out_w)
{
    if (x.rows() != static_cast<Eigen::Index>(gh) * gw) {
        throw ConfigError("resize_bilinear_rows: map rows do not match grid");
    }
    const auto ty = linear_taps(gh, out_h);
    const auto tx = linear_taps(gw, out_w);
    const Eigen::Index c = x.cols();
    Matrix v = Matrix::Zero(static_cast<Eigen::Index>(out_h) * out_w, c);
    auto for_each_tap = [ty, tx, gw, out_h, out_w](auto&& fn) {
        for (int y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            for (int xo = 0; xo < out_w; ++xo) {
                const auto& b = tx[xo];
                const Eigen::Index o = static_cast<Eigen::Index>(y) * out_w + xo;
                fn(o, a.i0 * gw + b.i0, a.w0 * b.w0);
                fn(o, a.i0 * gw + b.i1, a.w0 * b.w1);
                fn(o, a.i1 * gw + b.i0, a.w1 * b.w0);
                fn(o, a.i1 * gw + b.i1, a.w1 * b.w1);
            }
        }
    };
    for_each_tap([&](Eigen::Index o, Eigen::Index i, double wgt) { v.row(o) += wgt * x.value().row(i); });
    return make_op(std::move(v), {x}, [x, for_each_tap](Node& out) {
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        for_each_tap([&](Eigen::Index o, Eigen::Index i, double wgt) { g.row(i) += wgt * out.grad.row(o); });
        push(x, g);
    });
}

/// log of the bilinear resize of exp(x), as a log-sum-exp over the taps.
/// Equal to log(resize_bilinear_rows(exp(x))) without underflow.
inline Var resize_bilinear_log_rows(const Var& logx, int gh, int gw, int out_h, int out_w)
{
    if (logx.rows() != static_cast<Eigen::Index>(gh) * gw) {
        throw ConfigError("resize_bilinear_log_rows: map rows do not match grid");
    }
    const auto ty = linear_taps(gh, out_h);
    const auto tx = linear_taps(gw, out_w);
    const Eigen::Index c = logx.cols();
    const Eigen::Index n_out = static_cast<Eigen::Index>(out_h) * out_w;
    struct Tap {
        Eigen::Index src;
        double log_w;
    };
    std::vector<std::array<Tap, 4>> taps(static_cast<std::size_t>(n_out));
    std::vector<int> counts(static_cast<std::size_t>(n_out), 0);
    for (int y = 0; y < out_h; ++y) {
        const auto& a = ty[y];
        for (int xo = 0; xo < out_w; ++xo) {
            const auto& b = tx[xo];
            const auto o = static_cast<std::size_t>(y * out_w + xo);
            const std::array<std::pair<Eigen::Index, double>, 4> cand{{{a.i0 * gw + b.i0, a.w0 * b.w0},
                                                                       {a.i0 * gw + b.i1, a.w0 * b.w1},
                                                                       {a.i1 * gw + b.i0, a.w1 * b.w0},
                                                                       {a.i1 * gw + b.i1, a.w1 * b.w1}}};
            for (const auto& [src, w] : cand) {
                if (w > 0.0) {
                    taps[o][static_cast<std::size_t>(counts[o]++)] = {src, std::log(w)};
                }
            }
        }
    }
    const Matrix& lx = logx.value();
    Matrix v(n_out, c);
    for (Eigen::Index o = 0; o < n_out; ++o) {
        const auto& t = taps[static_cast<std::size_t>(o)];
        const int k = counts[static_cast<std::size_t>(o)];
        for (Eigen::Index ch = 0; ch < c; ++ch) {
            double m = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < k; ++j) {
                m = std::max(m, t[j].log_w + lx(t[j].src, ch));
            }
            double s = 0.0;
            for (int j = 0; j < k; ++j) {
                s += std::exp(t[j].log_w + lx(t[j].src, ch) - m);
            }
            v(o, ch) = m + std::log(s);
        }
    }
    return make_op(v, {logx}, [logx, v, taps = std::move(taps), counts = std::move(counts)](Node& out) {
        const Matrix& lx2 = logx.value();
        Matrix g = Matrix::Zero(lx2.rows(), lx2.cols());
        for (Eigen::Index o = 0; o < v.rows(); ++o) {
            const auto& t = taps[static_cast<std::size_t>(o)];
            for (int j = 0; j < counts[static_cast<std::size_t>(o)]; ++j) {
                for (Eigen::Index ch = 0; ch < v.cols(); ++ch) {
                    g(t[j].src, ch) += out.grad(o, ch) * std::exp(t[j].log_w + lx2(t[j].src, ch) - v(o, ch));
                }
            }
        }
        push(logx, g);
    });
}

}  // namespace zsad::ag
