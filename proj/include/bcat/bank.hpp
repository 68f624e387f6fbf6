#pragma once

// Per-target-sample memory bank: one L2-normalized feature row and one
// class-probability row per sample. Pseudo labels for a batch are the mean
// probability of the k nearest bank rows by cosine similarity, never
// including the query's own slot. Single writer; the training loop
// serializes reads and updates.

#include <set>

#include "bcat/ops.hpp"

namespace bcat {

struct MemoryBank {
    Tensor features;  // [n_t, feat_dim], unit rows once initialized
    Tensor probs;     // [n_t, K], row-stochastic
    std::vector<char> initialized;

    int size() const { return features.dim(0); }
    int feat_dim() const { return features.dim(1); }
    int n_classes() const { return probs.dim(1); }
};

// Fresh bank: uniform probabilities, zero (uninitialized) features.
inline MemoryBank init_bank(int n_t, int k_classes, int feat_dim) {
    if (n_t < 1 || k_classes < 1 || feat_dim < 1) throw std::invalid_argument("bank: sizes must be >= 1");
    MemoryBank b;
    b.features = Tensor({n_t, feat_dim});
    b.probs = Tensor::full({n_t, k_classes}, 1.0 / k_classes);
    b.initialized.assign(static_cast<size_t>(n_t), 0);
    return b;
}

namespace detail {
// Zero vectors stay zero; everything else becomes unit length.
inline void l2_normalize_row(double* row, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += row[i] * row[i];
    const double norm = std::sqrt(s);
    if (norm < 1e-12) return;
    for (int i = 0; i < d; ++i) row[i] /= norm;
}
}  // namespace detail

inline Tensor l2_normalize_rows(const Tensor& t) {
    Tensor out = t;
    const int d = t.last_dim();
    const int64_t rows = t.numel() / d;
    for (int64_t r = 0; r < rows; ++r) detail::l2_normalize_row(out.data.data() + r * d, d);
    return out;
}

// Momentum update per row: feature <- normalize(m*old + (1-m)*normalize(new))
// once initialized, else normalize(new); prob <- m*old + (1-m)*new,
// renormalized. Indices must be unique and in range.
inline void update_bank(MemoryBank& bank, const std::vector<int>& indices, const Tensor& feats, const Tensor& probs,
                        double momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("bank: momentum must be in [0, 1)");
    const int b = static_cast<int>(indices.size());
    if (feats.rank() != 2 || feats.dim(0) != b || feats.dim(1) != bank.feat_dim())
        throw std::invalid_argument("bank: feature batch " + shape_str(feats.shape) + " does not match bank width " +
                                    std::to_string(bank.feat_dim()));
    if (probs.rank() != 2 || probs.dim(0) != b || probs.dim(1) != bank.n_classes())
        throw std::invalid_argument("bank: prob batch " + shape_str(probs.shape) + " does not match bank classes " +
                                    std::to_string(bank.n_classes()));
    std::set<int> seen;
    for (int idx : indices) {
        if (idx < 0 || idx >= bank.size())
            throw std::invalid_argument("bank: index " + std::to_string(idx) + " out of range [0, " +
                                        std::to_string(bank.size()) + ")");
        if (!seen.insert(idx).second)
            throw std::invalid_argument("bank: duplicate index " + std::to_string(idx) + " in one update");
    }
    const int fd = bank.feat_dim(), kc = bank.n_classes();
    for (int i = 0; i < b; ++i) {
        const int slot = indices[static_cast<size_t>(i)];
        std::vector<double> fnew(feats.data.begin() + static_cast<int64_t>(i) * fd,
                                 feats.data.begin() + static_cast<int64_t>(i + 1) * fd);
        detail::l2_normalize_row(fnew.data(), fd);
        double* frow = bank.features.data.data() + static_cast<int64_t>(slot) * fd;
        if (bank.initialized[static_cast<size_t>(slot)]) {
            for (int c = 0; c < fd; ++c) frow[c] = momentum * frow[c] + (1.0 - momentum) * fnew[static_cast<size_t>(c)];
            detail::l2_normalize_row(frow, fd);
        } else {
            std::copy(fnew.begin(), fnew.end(), frow);
        }
        double* prow = bank.probs.data.data() + static_cast<int64_t>(slot) * kc;
        double sum = 0.0;
        for (int c = 0; c < kc; ++c) {
            prow[c] = momentum * prow[c] + (1.0 - momentum) * probs.data[static_cast<int64_t>(i) * kc + c];
            sum += prow[c];
        }
        if (sum > 0.0)
            for (int c = 0; c < kc; ++c) prow[c] /= sum;
        bank.initialized[static_cast<size_t>(slot)] = 1;
    }
}

// Neighbor-averaged pseudo labels: q_hat[i] = mean prob of the k bank rows
// most cosine-similar to query i, excluding the query's own slot; yhat =
// argmax (smallest class on ties). Equal similarities break toward smaller
// bank index.
inline std::pair<Tensor, std::vector<int>> knn_pseudo_labels(const MemoryBank& bank, const std::vector<int>& query_indices,
                                                             const Tensor& query_feats, int k) {
    const int n = bank.size();
    if (k < 1 || k > n - 1)
        throw std::invalid_argument("bank: k " + std::to_string(k) + " out of range [1, " + std::to_string(n - 1) + "]");
    const int b = static_cast<int>(query_indices.size());
    if (query_feats.rank() != 2 || query_feats.dim(0) != b || query_feats.dim(1) != bank.feat_dim())
        throw std::invalid_argument("bank: query batch " + shape_str(query_feats.shape) + " does not match bank width " +
                                    std::to_string(bank.feat_dim()));
    for (int idx : query_indices)
        if (idx < 0 || idx >= n)
            throw std::invalid_argument("bank: query index " + std::to_string(idx) + " out of range");

    const int fd = bank.feat_dim(), kc = bank.n_classes();
    Tensor q_hat({b, kc});
    std::vector<int> y_hat(static_cast<size_t>(b));
    std::vector<std::pair<double, int>> sims;  // (-similarity, index): sort ascending
    sims.reserve(static_cast<size_t>(n));
    for (int i = 0; i < b; ++i) {
        std::vector<double> q(query_feats.data.begin() + static_cast<int64_t>(i) * fd,
                              query_feats.data.begin() + static_cast<int64_t>(i + 1) * fd);
        detail::l2_normalize_row(q.data(), fd);
        sims.clear();
        for (int r = 0; r < n; ++r) {
            if (r == query_indices[static_cast<size_t>(i)]) continue;
            const double* row = bank.features.data.data() + static_cast<int64_t>(r) * fd;
            double dot = 0.0;
            for (int c = 0; c < fd; ++c) dot += q[static_cast<size_t>(c)] * row[c];
            sims.emplace_back(-dot, r);
        }
        std::partial_sort(sims.begin(), sims.begin() + k, sims.end());
        double* out = q_hat.data.data() + static_cast<int64_t>(i) * kc;
        for (int j = 0; j < k; ++j) {
            const double* prow = bank.probs.data.data() + static_cast<int64_t>(sims[static_cast<size_t>(j)].second) * kc;
            for (int c = 0; c < kc; ++c) out[c] += prow[c];
        }
        for (int c = 0; c < kc; ++c) out[c] /= k;
        int best = 0;
        for (int c = 1; c < kc; ++c)
            if (out[c] > out[best]) best = c;
        y_hat[static_cast<size_t>(i)] = best;
    }
    return {std::move(q_hat), std::move(y_hat)};
}

}  // namespace bcat
