#pragma once

// Loss functions: source cross-entropy, the squared-MMD transfer loss on the
// pooled augmented features, the pseudo-label target loss, the combined
// total, and the temperature-scaled distillation loss. Each loss has a
// graph-building form (for training) and a plain form that evaluates through
// a throwaway graph, so both paths share the same arithmetic.

#include <optional>

#include "bcat/autodiff.hpp"

namespace bcat {

constexpr double kLogFloor = 1e-12;  // every -log term clamps here

// Multi-RBF kernel family. The base bandwidth sigma^2 is the median pairwise
// squared distance over the pooled sample set (fallback 1.0 when the median
// is zero) unless fixed_sigma2 pins it; each multiplier contributes
// exp(-d^2 / (mult * sigma^2)).
struct KernelSpec {
    std::vector<double> multipliers = {0.25, 0.5, 1.0, 2.0, 4.0};
    std::optional<double> fixed_sigma2;

    void validate() const {
        if (multipliers.empty()) throw std::invalid_argument("kernel: multiplier list must be nonempty");
        for (double m : multipliers)
            if (!(m > 0.0)) throw std::invalid_argument("kernel: multipliers must be positive");
        if (fixed_sigma2 && !(*fixed_sigma2 > 0.0)) throw std::invalid_argument("kernel: fixed sigma^2 must be positive");
    }
};

struct LossReport {
    double cls_s = 0.0;
    double cls_t = 0.0;
    double transfer = 0.0;
    double total = 0.0;
    double epsilon = 0.0;
    double beta = 0.0;
};

// ------------------------------------------------------------- cross-entropy

inline void check_labels(const std::vector<int>& labels, int k, const char* op) {
    for (int y : labels)
        if (y < 0 || y >= k)
            throw std::invalid_argument(std::string(op) + ": label " + std::to_string(y) + " out of range [0, " +
                                        std::to_string(k) + ")");
}

// mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
inline Var cross_entropy_v(Graph& g, Var logits, const std::vector<int>& labels) {
    const std::vector<int> s = g.val(logits).shape;  // copy: applies below may relocate values
    if (s.size() != 2) throw std::invalid_argument("cross_entropy: expected [b, K] logits, got " + shape_str(s));
    if (static_cast<int>(labels.size()) != s[0]) throw std::invalid_argument("cross_entropy: label count mismatch");
    check_labels(labels, s[1], "cross_entropy");
    Var picked = gather_last(log_softmax_rows(logits), labels);
    return scale(sum_all(picked), -1.0 / static_cast<double>(s[0]));
}

inline double cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
    Graph g;
    return g.val(cross_entropy_v(g, g.constant(logits), labels)).data[0];
}

// ------------------------------------------------------------------ softmax-T

inline Var softmax_temperature_v(Graph& g, Var logits, double temperature) {
    (void)g;
    if (!(temperature > 0.0)) throw std::invalid_argument("softmax_T: temperature must be > 0");
    return softmax_rows(scale(logits, 1.0 / temperature));
}

inline Tensor softmax_temperature(const Tensor& logits, double temperature) {
    Graph g;
    return g.val(softmax_temperature_v(g, g.constant(logits), temperature));
}

// ------------------------------------------------------------------- MMD^2

namespace detail {

// Median pairwise squared distance over the pooled rows of X and Y; the
// multiset of pair distances is symmetric in (X, Y), and sorting makes the
// median independent of argument order. Even counts average the two middle
// elements. Fallback 1.0 when the median is 0.
inline double median_sq_dist(const Tensor& x, const Tensor& y) {
    const int d = x.dim(1);
    std::vector<const double*> rows;
    for (int i = 0; i < x.dim(0); ++i) rows.push_back(x.data.data() + static_cast<int64_t>(i) * d);
    for (int i = 0; i < y.dim(0); ++i) rows.push_back(y.data.data() + static_cast<int64_t>(i) * d);
    std::vector<double> d2;
    d2.reserve(rows.size() * (rows.size() - 1) / 2);
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = i + 1; j < rows.size(); ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = rows[i][c] - rows[j][c];
                s += diff * diff;
            }
            d2.push_back(s);
        }
    if (d2.empty()) return 1.0;
    std::sort(d2.begin(), d2.end());
    const size_t m = d2.size() / 2;
    const double med = d2.size() % 2 == 1 ? d2[m] : 0.5 * (d2[m - 1] + d2[m]);
    return med > 0.0 ? med : 1.0;
}

inline bool lex_less(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return a.shape < b.shape;
    return a.data < b.data;
}

// Sum over the kernel family of exp(-D2(A,B) / (mult * sigma2)), mean over
// all n*m entries.
inline Var kernel_mean_v(Graph& g, Var a, Var b, const KernelSpec& k, double sigma2) {
    const int n = g.val(a).dim(0), m = g.val(b).dim(0);
    Var sa = reshape(sum_axis(mul(a, a), 1), {n, 1});
    Var sb = reshape(sum_axis(mul(b, b), 1), {1, m});
    Var cross = matmul(a, transpose_last2(b));
    Var d2 = sub(add(sa, sb), scale(cross, 2.0));  // [n, m]
    Var acc{nullptr, -1};
    for (size_t i = 0; i < k.multipliers.size(); ++i) {
        Var term = exp_t(scale(d2, -1.0 / (k.multipliers[i] * sigma2)));
        acc = i == 0 ? term : add(acc, term);
    }
    return scale(sum_all(acc), 1.0 / (static_cast<double>(n) * static_cast<double>(m)));
}

}  // namespace detail

// Biased (V-statistic) estimator mean(Kxx) + mean(Kyy) - 2 mean(Kxy).
// Arguments are canonically ordered internally so the estimator is exactly
// symmetric; identical inputs give exactly 0.
inline Var mmd2_v(Graph& g, Var x, Var y, const KernelSpec& k = {}) {
    k.validate();
    const Tensor& xv = g.val(x);
    const Tensor& yv = g.val(y);
    if (xv.rank() != 2 || yv.rank() != 2)
        throw std::invalid_argument("mmd2: expected [n, d] samples, got " + shape_str(xv.shape) + " and " +
                                    shape_str(yv.shape));
    if (xv.dim(1) != yv.dim(1))
        throw std::invalid_argument("mmd2: feature widths disagree: " + shape_str(xv.shape) + " vs " +
                                    shape_str(yv.shape));
    if (xv.dim(0) < 2 || yv.dim(0) < 2)
        throw std::invalid_argument("mmd2: need at least 2 samples per side, got " + std::to_string(xv.dim(0)) +
                                    " and " + std::to_string(yv.dim(0)));
    if (detail::lex_less(yv, xv)) std::swap(x, y);
    const double sigma2 = k.fixed_sigma2 ? *k.fixed_sigma2 : detail::median_sq_dist(g.val(x), g.val(y));
    Var mxx = detail::kernel_mean_v(g, x, x, k, sigma2);
    Var myy = detail::kernel_mean_v(g, y, y, k, sigma2);
    Var mxy = detail::kernel_mean_v(g, x, y, k, sigma2);
    return add(add(mxx, myy), scale(mxy, -2.0));
}

inline double mmd2(const Tensor& x, const Tensor& y, const KernelSpec& k = {}) {
    Graph g;
    return g.val(mmd2_v(g, g.constant(x), g.constant(y), k)).data[0];
}

// ---------------------------------------------------------- target pseudo loss

// yhat per row = argmax of q_hat (smallest index on ties).
inline std::vector<int> pseudo_label_argmax(const Tensor& q_hat) { return argmax_rows(q_hat); }

// -mean_i q_hat[i, yhat_i] * log probs[i, yhat_i], with q_hat held constant.
inline Var target_pseudo_loss_v(Graph& g, Var probs, const Tensor& q_hat) {
    const std::vector<int> s = g.val(probs).shape;  // copy: applies below may relocate values
    if (s.size() != 2 || q_hat.shape != s)
        throw std::invalid_argument("target_pseudo_loss: probs " + shape_str(s) + " and q_hat " +
                                    shape_str(q_hat.shape) + " must both be [b, K]");
    const int b = s[0], k = s[1];
    for (int r = 0; r < b; ++r) {
        double sum = 0.0;
        for (int c = 0; c < k; ++c) sum += q_hat.data[static_cast<size_t>(r) * k + c];
        if (std::abs(sum - 1.0) > 1e-6)
            throw std::invalid_argument("target_pseudo_loss: q_hat row " + std::to_string(r) +
                                        " sums to " + std::to_string(sum) + ", expected 1");
    }
    const std::vector<int> yhat = pseudo_label_argmax(q_hat);
    Tensor weights({b});
    for (int r = 0; r < b; ++r) weights.data[static_cast<size_t>(r)] = q_hat.data[static_cast<size_t>(r) * k + yhat[static_cast<size_t>(r)]];
    Var picked = log_clamped(gather_last(probs, yhat), kLogFloor);
    Var weighted = mul(picked, g.constant(weights));
    return scale(sum_all(weighted), -1.0 / static_cast<double>(b));
}

inline double target_pseudo_loss(const Tensor& probs, const Tensor& q_hat) {
    Graph g;
    return g.val(target_pseudo_loss_v(g, g.constant(probs), q_hat)).data[0];
}

// -------------------------------------------------------------------- totals

// total = cls_s + epsilon * cls_t + beta * transfer.
inline LossReport bcat_total_loss(double cls_s, double cls_t, double transfer, double epsilon, double beta) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("bcat_total_loss: epsilon must be in [0, 1]");
    if (!(beta >= 0.0)) throw std::invalid_argument("bcat_total_loss: beta must be >= 0");
    LossReport r;
    r.cls_s = cls_s;
    r.cls_t = cls_t;
    r.transfer = transfer;
    r.epsilon = epsilon;
    r.beta = beta;
    r.total = cls_s + epsilon * cls_t + beta * transfer;
    return r;
}

// Same arithmetic on the graph: (cls_s + eps*cls_t) + beta*transfer.
inline Var bcat_total_v(Var cls_s, Var cls_t, Var transfer, double epsilon, double beta) {
    return add(add(cls_s, scale(cls_t, epsilon)), scale(transfer, beta));
}

// ------------------------------------------------------------------ KD loss

// soft term: alpha * T^2 * mean_batch(-sum_k p_k log q_k) with p/q the
// softmax-T distributions of the teacher/student logits (teacher constant);
// hard term: eps * (1 - alpha) * CE(student_logits, pseudo_labels).
inline Var kd_loss_v(Graph& g, const Tensor& teacher_logits, Var student_logits, const std::vector<int>& pseudo_labels,
                     double alpha, double temperature, double epsilon) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("kd_loss: alpha must be in [0, 1]");
    if (!(temperature > 0.0)) throw std::invalid_argument("kd_loss: temperature must be > 0");
    const std::vector<int> s = g.val(student_logits).shape;  // copy: applies below may relocate values
    if (s.size() != 2 || teacher_logits.shape != s)
        throw std::invalid_argument("kd_loss: teacher " + shape_str(teacher_logits.shape) + " and student " +
                                    shape_str(s) + " logits must both be [b, K]");
    const int b = s[0];
    const Tensor p = softmax_temperature(teacher_logits, temperature);
    Var q = softmax_temperature_v(g, student_logits, temperature);
    Var ce_soft = scale(sum_all(mul(log_clamped(q, kLogFloor), g.constant(p))), -1.0 / static_cast<double>(b));
    Var soft = scale(ce_soft, alpha * temperature * temperature);
    Var hard = scale(cross_entropy_v(g, student_logits, pseudo_labels), epsilon * (1.0 - alpha));
    return add(soft, hard);
}

inline double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, const std::vector<int>& pseudo_labels,
                      double alpha, double temperature, double epsilon) {
    Graph g;
    return g.val(kd_loss_v(g, teacher_logits, g.constant(student_logits), pseudo_labels, alpha, temperature, epsilon))
        .data[0];
}

}  // namespace bcat
