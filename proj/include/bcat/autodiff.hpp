#pragma once

// Reverse-mode autodiff over a define-by-run tape.
//
// A Graph owns every value produced while building a computation: leaves go
// in via Graph::leaf, primitives append a node (op id, input ids, output id)
// and evaluate immediately through the same kernels as eager code. Nodes are
// therefore topologically ordered by construction, and Graph::replay can
// recompute every recorded output from the leaves bit-exactly.
//
// Graph::backward(loss) walks the tape in reverse node order, accumulating
// input gradients in input order, and returns the gradient for every
// grad-requiring leaf. Gradients are plain tensors computed with the raw
// kernels; the tape itself is not differentiated.

#include <functional>
#include <map>

#include "bcat/ops.hpp"

namespace bcat {

class Graph;

struct Var {
    Graph* g = nullptr;
    int id = -1;
};

enum class Op {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kScale,
    kMatMul,
    kReshape,
    kPermute,
    kSoftmaxRows,
    kLogSoftmaxRows,
    kLayerNorm,
    kGelu,
    kExp,
    kLogClamped,
    kMeanAxis,
    kSumAxis,
    kSumAll,
    kConcatLast,
    kGatherLast,
};

class Graph {
  public:
    Var leaf(Tensor t) {
        check_finite(t, "graph leaf");
        const int id = static_cast<int>(vals_.size());
        vals_.push_back(std::move(t));
        Node n;
        n.op = Op::kLeaf;
        n.out = id;
        nodes_.push_back(std::move(n));
        return Var{this, id};
    }

    Var constant(Tensor t) {
        t.requires_grad = false;
        return leaf(std::move(t));
    }

    const Tensor& val(int id) const { return vals_.at(static_cast<size_t>(id)); }
    const Tensor& val(Var v) const { return val(v.id); }
    size_t num_values() const { return vals_.size(); }

    Var apply(Op op, std::vector<int> in, double f0 = 0.0, int i0 = 0, std::vector<int> ints = {}) {
        Node n;
        n.op = op;
        n.in = std::move(in);
        n.f0 = f0;
        n.i0 = i0;
        n.ints = std::move(ints);
        Tensor out = eval_node(n);
        for (int i : n.in)
            if (vals_[static_cast<size_t>(i)].requires_grad) out.requires_grad = true;
        n.out = static_cast<int>(vals_.size());
        vals_.push_back(std::move(out));
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.back().out};
    }

    // Recompute every non-leaf value from the current leaves, in node order.
    void replay() {
        for (auto& n : nodes_) {
            if (n.op == Op::kLeaf) continue;
            const bool rg = vals_[static_cast<size_t>(n.out)].requires_grad;
            vals_[static_cast<size_t>(n.out)] = eval_node(n);
            vals_[static_cast<size_t>(n.out)].requires_grad = rg;
        }
    }

    // Gradients of a scalar loss with respect to every grad-requiring leaf.
    // Unreached leaves get zero gradients.
    std::map<int, Tensor> backward(Var loss) const {
        if (loss.g != this || loss.id < 0 || loss.id >= static_cast<int>(vals_.size()))
            throw std::invalid_argument("backward: loss was not produced by this graph");
        const Tensor& lv = vals_[static_cast<size_t>(loss.id)];
        if (lv.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(lv.shape));

        std::vector<std::vector<double>> grads(vals_.size());
        grads[static_cast<size_t>(loss.id)] = {1.0};

        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            const Node& n = *it;
            if (n.op == Op::kLeaf) continue;
            auto& gout = grads[static_cast<size_t>(n.out)];
            if (gout.empty()) continue;
            if (!vals_[static_cast<size_t>(n.out)].requires_grad) continue;
            const Tensor g(vals_[static_cast<size_t>(n.out)].shape, gout);
            backprop_node(n, g, grads);
        }

        std::map<int, Tensor> out;
        for (size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.op != Op::kLeaf) continue;
            const Tensor& v = vals_[static_cast<size_t>(n.out)];
            if (!v.requires_grad) continue;
            Tensor gt(v.shape);
            if (!grads[static_cast<size_t>(n.out)].empty()) gt.data = grads[static_cast<size_t>(n.out)];
            out.emplace(n.out, std::move(gt));
        }
        return out;
    }

  private:
    struct Node {
        Op op = Op::kLeaf;
        std::vector<int> in;
        int out = -1;
        double f0 = 0.0;        // scale factor / eps / log floor
        int i0 = 0;             // reduction axis
        std::vector<int> ints;  // permute axes / reshape dims / gather indices
    };

    const Tensor& in_val(const Node& n, size_t i) const { return vals_[static_cast<size_t>(n.in[i])]; }

    Tensor eval_node(const Node& n) const {
        switch (n.op) {
            case Op::kAdd: return add(in_val(n, 0), in_val(n, 1));
            case Op::kSub: return sub(in_val(n, 0), in_val(n, 1));
            case Op::kMul: return mul(in_val(n, 0), in_val(n, 1));
            case Op::kScale: return scale(in_val(n, 0), n.f0);
            case Op::kMatMul: return matmul(in_val(n, 0), in_val(n, 1));
            case Op::kReshape: return reshape(in_val(n, 0), n.ints);
            case Op::kPermute: return permute(in_val(n, 0), n.ints);
            case Op::kSoftmaxRows: return softmax_rows(in_val(n, 0));
            case Op::kLogSoftmaxRows: return log_softmax_rows(in_val(n, 0));
            case Op::kLayerNorm: return layer_norm(in_val(n, 0), in_val(n, 1), in_val(n, 2), n.f0);
            case Op::kGelu: return gelu(in_val(n, 0));
            case Op::kExp: return exp_t(in_val(n, 0));
            case Op::kLogClamped: return log_clamped(in_val(n, 0), n.f0);
            case Op::kMeanAxis: return mean_axis(in_val(n, 0), n.i0);
            case Op::kSumAxis: return sum_axis(in_val(n, 0), n.i0);
            case Op::kSumAll: return sum_all(in_val(n, 0));
            case Op::kConcatLast: return concat_last(in_val(n, 0), in_val(n, 1));
            case Op::kGatherLast: return gather_last(in_val(n, 0), n.ints);
            case Op::kLeaf: break;
        }
        throw std::logic_error("eval_node: bad op");
    }

    static void accumulate(std::vector<std::vector<double>>& grads, int id, const Tensor& contrib) {
        auto& buf = grads[static_cast<size_t>(id)];
        if (buf.empty()) buf.assign(contrib.data.size(), 0.0);
        for (size_t i = 0; i < contrib.data.size(); ++i) buf[i] += contrib.data[i];
    }

    bool wants_grad(const Node& n, size_t i) const { return in_val(n, i).requires_grad; }

    void backprop_node(const Node& n, const Tensor& g, std::vector<std::vector<double>>& grads) const {
        switch (n.op) {
            case Op::kAdd: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], reduce_to_shape(g, in_val(n, 0).shape));
                if (wants_grad(n, 1)) accumulate(grads, n.in[1], reduce_to_shape(g, in_val(n, 1).shape));
                return;
            }
            case Op::kSub: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], reduce_to_shape(g, in_val(n, 0).shape));
                if (wants_grad(n, 1)) accumulate(grads, n.in[1], reduce_to_shape(scale(g, -1.0), in_val(n, 1).shape));
                return;
            }
            case Op::kMul: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], reduce_to_shape(mul(g, in_val(n, 1)), in_val(n, 0).shape));
                if (wants_grad(n, 1)) accumulate(grads, n.in[1], reduce_to_shape(mul(g, in_val(n, 0)), in_val(n, 1).shape));
                return;
            }
            case Op::kScale: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], scale(g, n.f0));
                return;
            }
            case Op::kMatMul: {
                const Tensor& a = in_val(n, 0);
                const Tensor& b = in_val(n, 1);
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], reduce_to_shape(matmul(g, transpose_last2(b)), a.shape));
                if (wants_grad(n, 1)) accumulate(grads, n.in[1], reduce_to_shape(matmul(transpose_last2(a), g), b.shape));
                return;
            }
            case Op::kReshape: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], reshape(g, in_val(n, 0).shape));
                return;
            }
            case Op::kPermute: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], permute(g, inverse_axes(n.ints)));
                return;
            }
            case Op::kSoftmaxRows: {
                if (!wants_grad(n, 0)) return;
                const Tensor& y = vals_[static_cast<size_t>(n.out)];
                Tensor dx(y.shape);
                const int64_t cols = y.last_dim();
                const int64_t rows = y.numel() / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.data.data() + r * cols;
                    const double* gr = g.data.data() + r * cols;
                    double dot = 0.0;
                    for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                    double* dr = dx.data.data() + r * cols;
                    for (int64_t j = 0; j < cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
                }
                accumulate(grads, n.in[0], dx);
                return;
            }
            case Op::kLogSoftmaxRows: {
                if (!wants_grad(n, 0)) return;
                const Tensor& y = vals_[static_cast<size_t>(n.out)];
                Tensor dx(y.shape);
                const int64_t cols = y.last_dim();
                const int64_t rows = y.numel() / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.data.data() + r * cols;
                    const double* gr = g.data.data() + r * cols;
                    double gsum = 0.0;
                    for (int64_t j = 0; j < cols; ++j) gsum += gr[j];
                    double* dr = dx.data.data() + r * cols;
                    for (int64_t j = 0; j < cols; ++j) dr[j] = gr[j] - std::exp(yr[j]) * gsum;
                }
                accumulate(grads, n.in[0], dx);
                return;
            }
            case Op::kLayerNorm: {
                const Tensor& x = in_val(n, 0);
                const Tensor& gamma = in_val(n, 1);
                const double eps = n.f0;
                const int d = x.last_dim();
                const int64_t rows = x.numel() / d;
                Tensor dx(x.shape), dgamma({d}), dbeta({d});
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = x.data.data() + r * d;
                    const double* gr = g.data.data() + r * d;
                    double mean = 0.0;
                    for (int j = 0; j < d; ++j) mean += xr[j];
                    mean /= d;
                    double var = 0.0;
                    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= d;
                    const double inv_std = 1.0 / std::sqrt(var + eps);
                    double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv_std;
                        const double dxhat = gr[j] * gamma.data[static_cast<size_t>(j)];
                        dgamma.data[static_cast<size_t>(j)] += gr[j] * xhat;
                        dbeta.data[static_cast<size_t>(j)] += gr[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= d;
                    m2 /= d;
                    double* dr = dx.data.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv_std;
                        const double dxhat = gr[j] * gamma.data[static_cast<size_t>(j)];
                        dr[j] = (dxhat - m1 - xhat * m2) * inv_std;
                    }
                }
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], dx);
                if (wants_grad(n, 1)) accumulate(grads, n.in[1], dgamma);
                if (wants_grad(n, 2)) accumulate(grads, n.in[2], dbeta);
                return;
            }
            case Op::kGelu: {
                if (!wants_grad(n, 0)) return;
                const Tensor& x = in_val(n, 0);
                Tensor dx(x.shape);
                constexpr double inv_sqrt2 = 0.7071067811865475244;
                constexpr double inv_sqrt2pi = 0.3989422804014326779;
                for (size_t i = 0; i < x.data.size(); ++i) {
                    const double xi = x.data[i];
                    const double phi = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
                    const double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
                    dx.data[i] = g.data[i] * (phi + xi * pdf);
                }
                accumulate(grads, n.in[0], dx);
                return;
            }
            case Op::kExp: {
                if (wants_grad(n, 0)) accumulate(grads, n.in[0], mul(g, vals_[static_cast<size_t>(n.out)]));
                return;
            }
            case Op::kLogClamped: {
                if (!wants_grad(n, 0)) return;
                const Tensor& x = in_val(n, 0);
                Tensor dx(x.shape);
                for (size_t i = 0; i < x.data.size(); ++i)
                    dx.data[i] = x.data[i] > n.f0 ? g.data[i] / x.data[i] : 0.0;
                accumulate(grads, n.in[0], dx);
                return;
            }
            case Op::kMeanAxis:
            case Op::kSumAxis: {
                if (!wants_grad(n, 0)) return;
                const Tensor& x = in_val(n, 0);
                const int axis = n.i0;
                const int64_t nd = x.shape[static_cast<size_t>(axis)];
                const double w = n.op == Op::kMeanAxis ? 1.0 / static_cast<double>(nd) : 1.0;
                int64_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
                for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<size_t>(i)];
                Tensor dx(x.shape);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t j = 0; j < nd; ++j) {
                        const double* gsrc = g.data.data() + o * inner;
                        double* dst = dx.data.data() + (o * nd + j) * inner;
                        for (int64_t i = 0; i < inner; ++i) dst[i] = gsrc[i] * w;
                    }
                accumulate(grads, n.in[0], dx);
                return;
            }
            case Op::kSumAll: {
                if (!wants_grad(n, 0)) return;
                accumulate(grads, n.in[0], Tensor::full(in_val(n, 0).shape, g.data[0]));
                return;
            }
            case Op::kConcatLast: {
                const Tensor& a = in_val(n, 0);
                const Tensor& b = in_val(n, 1);
                const int64_t ca = a.last_dim(), cb = b.last_dim();
                const int64_t rows = a.numel() / ca;
                if (wants_grad(n, 0)) {
                    Tensor da(a.shape);
                    for (int64_t r = 0; r < rows; ++r)
                        std::copy_n(g.data.data() + r * (ca + cb), ca, da.data.data() + r * ca);
                    accumulate(grads, n.in[0], da);
                }
                if (wants_grad(n, 1)) {
                    Tensor db(b.shape);
                    for (int64_t r = 0; r < rows; ++r)
                        std::copy_n(g.data.data() + r * (ca + cb) + ca, cb, db.data.data() + r * cb);
                    accumulate(grads, n.in[1], db);
                }
                return;
            }
            case Op::kGatherLast: {
                if (!wants_grad(n, 0)) return;
                const Tensor& a = in_val(n, 0);
                Tensor dx(a.shape);
                const int cols = a.dim(1);
                for (size_t r = 0; r < n.ints.size(); ++r)
                    dx.data[r * static_cast<size_t>(cols) + static_cast<size_t>(n.ints[r])] += g.data[r];
                accumulate(grads, n.in[0], dx);
                return;
            }
            case Op::kLeaf: return;
        }
    }

    std::vector<Tensor> vals_;
    std::vector<Node> nodes_;
};

namespace detail {
inline Graph* same_graph(Var a, Var b, const char* op) {
    if (a.g == nullptr || a.g != b.g) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
    return a.g;
}
}  // namespace detail

inline Var add(Var a, Var b) { return detail::same_graph(a, b, "add")->apply(Op::kAdd, {a.id, b.id}); }
inline Var sub(Var a, Var b) { return detail::same_graph(a, b, "sub")->apply(Op::kSub, {a.id, b.id}); }
inline Var mul(Var a, Var b) { return detail::same_graph(a, b, "mul")->apply(Op::kMul, {a.id, b.id}); }
inline Var scale(Var a, double c) { return a.g->apply(Op::kScale, {a.id}, c); }
inline Var matmul(Var a, Var b) { return detail::same_graph(a, b, "matmul")->apply(Op::kMatMul, {a.id, b.id}); }
inline Var reshape(Var a, std::vector<int> s) { return a.g->apply(Op::kReshape, {a.id}, 0.0, 0, std::move(s)); }
inline Var permute(Var a, std::vector<int> axes) { return a.g->apply(Op::kPermute, {a.id}, 0.0, 0, std::move(axes)); }
inline Var transpose_last2(Var a) {
    std::vector<int> axes(static_cast<size_t>(a.g->val(a).rank()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, std::move(axes));
}
inline Var softmax_rows(Var a) { return a.g->apply(Op::kSoftmaxRows, {a.id}); }
inline Var log_softmax_rows(Var a) { return a.g->apply(Op::kLogSoftmaxRows, {a.id}); }
inline Var layer_norm(Var a, Var gamma, Var beta, double eps) {
    detail::same_graph(a, gamma, "layer_norm");
    detail::same_graph(a, beta, "layer_norm");
    return a.g->apply(Op::kLayerNorm, {a.id, gamma.id, beta.id}, eps);
}
inline Var gelu(Var a) { return a.g->apply(Op::kGelu, {a.id}); }
inline Var exp_t(Var a) { return a.g->apply(Op::kExp, {a.id}); }
inline Var log_clamped(Var a, double floor_val) { return a.g->apply(Op::kLogClamped, {a.id}, floor_val); }
inline Var mean_axis(Var a, int axis) { return a.g->apply(Op::kMeanAxis, {a.id}, 0.0, axis); }
inline Var sum_axis(Var a, int axis) { return a.g->apply(Op::kSumAxis, {a.id}, 0.0, axis); }
inline Var sum_all(Var a) { return a.g->apply(Op::kSumAll, {a.id}); }
inline Var concat_last(Var a, Var b) { return detail::same_graph(a, b, "concat_last")->apply(Op::kConcatLast, {a.id, b.id}); }
inline Var gather_last(Var a, const std::vector<int>& idx) { return a.g->apply(Op::kGatherLast, {a.id}, 0.0, 0, idx); }

// Central differences (f(x+h e_i) - f(x-h e_i)) / (2h), one coordinate at a
// time. The reference gradient every backward rule is tested against.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be > 0");
    Tensor g(x.shape);
    Tensor probe = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double orig = x.data[i];
        probe.data[i] = orig + h;
        const double fp = f(probe);
        probe.data[i] = orig - h;
        const double fm = f(probe);
        probe.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace bcat
