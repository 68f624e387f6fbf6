#pragma once

// Forward kernels. Every kernel is a pure function, runs its loops in a
// fixed ascending order (reductions included), and rejects non-finite
// output, so identical inputs give bit-identical results on every run.
// Broadcasting follows the usual trailing-dimension rule: sizes must match
// or be 1.

#include <algorithm>
#include <functional>

#include "bcat/tensor.hpp"

namespace bcat {

// ---------------------------------------------------------------- broadcast

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    std::vector<int> out(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int da = i < ra ? a[static_cast<size_t>(ra - 1 - i)] : 1;
        const int db = i < rb ? b[static_cast<size_t>(rb - 1 - i)] : 1;
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                        " are not broadcast-compatible");
        out[static_cast<size_t>(r - 1 - i)] = std::max(da, db);
    }
    return out;
}

// Strides of `in` viewed as `out` (0 where a size-1 dim is broadcast).
inline std::vector<int64_t> broadcast_strides(const std::vector<int>& in, const std::vector<int>& out) {
    const int ri = static_cast<int>(in.size()), ro = static_cast<int>(out.size());
    std::vector<int64_t> st(static_cast<size_t>(ro), 0);
    const auto in_st = row_major_strides(in);
    for (int i = 0; i < ri; ++i) {
        const int oi = ro - ri + i;
        const int din = in[static_cast<size_t>(i)];
        const int dout = out[static_cast<size_t>(oi)];
        st[static_cast<size_t>(oi)] = (din == 1 && dout > 1) ? 0 : in_st[static_cast<size_t>(i)];
    }
    return st;
}

namespace detail {

template <typename F>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f) {
    if (a.shape == b.shape) {
        Tensor out(a.shape);
        for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
        check_finite(out, name);
        return out;
    }
    const auto oshape = broadcast_shape(a.shape, b.shape, name);
    Tensor out(oshape);
    const auto sa = broadcast_strides(a.shape, oshape);
    const auto sb = broadcast_strides(b.shape, oshape);
    const int r = static_cast<int>(oshape.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    int64_t offa = 0, offb = 0;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out.data[static_cast<size_t>(i)] = f(a.data[static_cast<size_t>(offa)], b.data[static_cast<size_t>(offb)]);
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            offa += sa[static_cast<size_t>(d)];
            offb += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            offa -= sa[static_cast<size_t>(d)] * oshape[static_cast<size_t>(d)];
            offb -= sb[static_cast<size_t>(d)] * oshape[static_cast<size_t>(d)];
        }
    }
    check_finite(out, name);
    return out;
}

}  // namespace detail

// Sum a gradient of shape `from` down to shape `to` (inverse of broadcast).
inline Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& to) {
    if (g.shape == to) return g;
    Tensor out(to);
    const auto st = broadcast_strides(to, g.shape);
    const int r = g.rank();
    std::vector<int> idx(static_cast<size_t>(r), 0);
    int64_t offt = 0;
    for (int64_t i = 0; i < g.numel(); ++i) {
        out.data[static_cast<size_t>(offt)] += g.data[static_cast<size_t>(i)];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            offt += st[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < g.shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            offt -= st[static_cast<size_t>(d)] * g.shape[static_cast<size_t>(d)];
        }
    }
    return out;
}

// --------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, "add", [](double x, double y) { return x + y; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, "sub", [](double x, double y) { return x - y; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, "mul", [](double x, double y) { return x * y; });
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * c;
    check_finite(out, "scale");
    return out;
}

inline Tensor exp_t(const Tensor& a) {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::exp(a.data[i]);
    check_finite(out, "exp");
    return out;
}

// log(max(x, floor)); gradient is 0 below the floor.
inline Tensor log_clamped(const Tensor& a, double floor_val) {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::log(std::max(a.data[i], floor_val));
    check_finite(out, "log_clamped");
    return out;
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

// Exact erf form: x * Phi(x).
inline Tensor gelu(const Tensor& a) {
    Tensor out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = gelu_scalar(a.data[i]);
    check_finite(out, "gelu");
    return out;
}

// ------------------------------------------------------------------- matmul

// a: [..., m, k] x b: [..., k, n] -> [..., m, n]; batch dims broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(a.shape) + " and " +
                                    shape_str(b.shape));
    const int m = a.shape[static_cast<size_t>(a.rank() - 2)];
    const int k = a.shape[static_cast<size_t>(a.rank() - 1)];
    const int k2 = b.shape[static_cast<size_t>(b.rank() - 2)];
    const int n = b.shape[static_cast<size_t>(b.rank() - 1)];
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions disagree for shapes " + shape_str(a.shape) + " and " +
                                    shape_str(b.shape));
    const std::vector<int> abatch(a.shape.begin(), a.shape.end() - 2);
    const std::vector<int> bbatch(b.shape.begin(), b.shape.end() - 2);
    const auto batch = broadcast_shape(abatch, bbatch, "matmul");
    std::vector<int> oshape = batch;
    oshape.push_back(m);
    oshape.push_back(n);
    Tensor out(oshape);

    const auto sa = broadcast_strides(abatch, batch);
    const auto sb = broadcast_strides(bbatch, batch);
    int64_t cells = 1;
    for (int d : batch) cells *= d;
    const int r = static_cast<int>(batch.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    int64_t ca = 0, cb = 0;
    const int64_t asz = static_cast<int64_t>(m) * k, bsz = static_cast<int64_t>(k) * n,
                  osz = static_cast<int64_t>(m) * n;
    for (int64_t cell = 0; cell < cells; ++cell) {
        const double* A = a.data.data() + ca * asz;
        const double* B = b.data.data() + cb * bsz;
        double* C = out.data.data() + cell * osz;
        for (int i = 0; i < m; ++i) {
            double* crow = C + static_cast<int64_t>(i) * n;
            const double* arow = A + static_cast<int64_t>(i) * k;
            for (int l = 0; l < k; ++l) {
                const double ail = arow[l];
                const double* brow = B + static_cast<int64_t>(l) * n;
                for (int j = 0; j < n; ++j) crow[j] += ail * brow[j];
            }
        }
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            ca += sa[static_cast<size_t>(d)];
            cb += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < batch[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            ca -= sa[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
            cb -= sb[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
        }
    }
    check_finite(out, "matmul");
    return out;
}

// ------------------------------------------------------------ shape movement

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(new_shape));
    Tensor out(std::move(new_shape), a.data);
    return out;
}

inline Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r) throw std::invalid_argument("permute: axes rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    std::vector<int> oshape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int ax = axes[static_cast<size_t>(i)];
        if (ax < 0 || ax >= r || seen[static_cast<size_t>(ax)])
            throw std::invalid_argument("permute: invalid axes for shape " + shape_str(a.shape));
        seen[static_cast<size_t>(ax)] = true;
        oshape[static_cast<size_t>(i)] = a.shape[static_cast<size_t>(ax)];
    }
    Tensor out(oshape);
    const auto in_st = row_major_strides(a.shape);
    std::vector<int64_t> gather_st(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) gather_st[static_cast<size_t>(i)] = in_st[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    std::vector<int> idx(static_cast<size_t>(r), 0);
    int64_t off = 0;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(off)];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            off += gather_st[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            off -= gather_st[static_cast<size_t>(d)] * oshape[static_cast<size_t>(d)];
        }
    }
    return out;
}

inline std::vector<int> inverse_axes(const std::vector<int>& axes) {
    std::vector<int> inv(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
    return inv;
}

inline Tensor transpose_last2(const Tensor& a) {
    std::vector<int> axes(static_cast<size_t>(a.rank()));
    for (int i = 0; i < a.rank(); ++i) axes[static_cast<size_t>(i)] = i;
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

// ---------------------------------------------------------------- row kernels

// Max-subtracted softmax over the last dimension.
inline Tensor softmax_rows(const Tensor& a) {
    if (a.rank() < 1 || a.last_dim() < 1) throw std::invalid_argument("softmax_rows: empty last dimension");
    if (!all_finite(a.data)) throw std::runtime_error("softmax_rows: non-finite input");
    const int64_t cols = a.last_dim();
    const int64_t rows = a.numel() / cols;
    Tensor out(a.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a.data.data() + r * cols;
        double* y = out.data.data() + r * cols;
        double mx = x[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
    }
    check_finite(out, "softmax_rows");
    return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
    if (a.rank() < 1 || a.last_dim() < 1) throw std::invalid_argument("log_softmax_rows: empty last dimension");
    if (!all_finite(a.data)) throw std::runtime_error("log_softmax_rows: non-finite input");
    const int64_t cols = a.last_dim();
    const int64_t rows = a.numel() / cols;
    Tensor out(a.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a.data.data() + r * cols;
        double* y = out.data.data() + r * cols;
        double mx = x[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
        const double lse = mx + std::log(sum);
        for (int64_t j = 0; j < cols; ++j) y[j] = x[j] - lse;
    }
    check_finite(out, "log_softmax_rows");
    return out;
}

// Per-row normalization over the last dimension (biased variance), then
// gamma * xhat + beta. eps >= 0; constant rows need eps > 0.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    const int d = a.last_dim();
    if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be >= 0");
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw std::invalid_argument("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "], got " +
                                    shape_str(gamma.shape) + " and " + shape_str(beta.shape));
    const int64_t rows = a.numel() / d;
    Tensor out(a.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a.data.data() + r * d;
        double* y = out.data.data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= d;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) y[j] = gamma.data[static_cast<size_t>(j)] * ((x[j] - mean) * inv_std) +
                                           beta.data[static_cast<size_t>(j)];
    }
    check_finite(out, "layer_norm");
    return out;
}

// ---------------------------------------------------------------- reductions

inline Tensor sum_axis(const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("sum_axis: axis out of range");
    std::vector<int> oshape;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) oshape.push_back(a.shape[static_cast<size_t>(i)]);
    if (oshape.empty()) oshape.push_back(1);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape[static_cast<size_t>(i)];
    const int64_t n = a.shape[static_cast<size_t>(axis)];
    Tensor out(oshape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j) {
            const double* src = a.data.data() + (o * n + j) * inner;
            double* dst = out.data.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    check_finite(out, "sum_axis");
    return out;
}

inline Tensor mean_axis(const Tensor& a, int axis) {
    Tensor s = sum_axis(a, axis);
    const double inv = 1.0 / a.shape[static_cast<size_t>(axis)];
    for (auto& v : s.data) v *= inv;
    return s;
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    Tensor out = Tensor::scalar(s);
    check_finite(out, "sum_all");
    return out;
}

// --------------------------------------------------------------- concat/gather

inline Tensor concat_last(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank()) throw std::invalid_argument("concat_last: rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.shape[static_cast<size_t>(i)] != b.shape[static_cast<size_t>(i)])
            throw std::invalid_argument("concat_last: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                                        " differ outside the last dimension");
    std::vector<int> oshape = a.shape;
    oshape.back() += b.last_dim();
    const int64_t ca = a.last_dim(), cb = b.last_dim();
    const int64_t rows = a.numel() / ca;
    Tensor out(oshape);
    for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.data.data() + r * ca, ca, out.data.data() + r * (ca + cb));
        std::copy_n(b.data.data() + r * cb, cb, out.data.data() + r * (ca + cb) + ca);
    }
    return out;
}

// a: [rows, K], idx[r] in [0, K) -> out[r] = a[r, idx[r]].
inline Tensor gather_last(const Tensor& a, const std::vector<int>& idx) {
    if (a.rank() != 2) throw std::invalid_argument("gather_last: expected rank-2 input, got " + shape_str(a.shape));
    const int rows = a.dim(0), cols = a.dim(1);
    if (static_cast<int>(idx.size()) != rows) throw std::invalid_argument("gather_last: index count mismatch");
    Tensor out({rows});
    for (int r = 0; r < rows; ++r) {
        const int c = idx[static_cast<size_t>(r)];
        if (c < 0 || c >= cols)
            throw std::invalid_argument("gather_last: index " + std::to_string(c) + " out of range [0, " +
                                        std::to_string(cols) + ")");
        out.data[static_cast<size_t>(r)] = a.data[static_cast<size_t>(r) * cols + static_cast<size_t>(c)];
    }
    return out;
}

// Argmax over the last dimension, smallest index on ties.
inline std::vector<int> argmax_rows(const Tensor& a) {
    const int64_t cols = a.last_dim();
    const int64_t rows = a.numel() / cols;
    std::vector<int> out(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a.data.data() + r * cols;
        int best = 0;
        for (int64_t j = 1; j < cols; ++j)
            if (x[j] > x[best]) best = static_cast<int>(j);
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

}  // namespace bcat
