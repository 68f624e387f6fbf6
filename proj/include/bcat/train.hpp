#pragma once

// The training loop, the epsilon schedule, the three inference paths and the
// student distillation loop.
//
// One training step: forward both domain batches through the quadruple
// backbone, pool+augment, classify both views; source cross-entropy on the
// source-dominant view, neighbor-averaged pseudo-label loss on the
// target-dominant view, squared MMD between the two views; combine with
// epsilon = epoch/total and the beta weight; backward; optimizer step; then
// update the memory bank with this step's (pre-update) target features and
// probabilities.
//
// Epoch batching: both domains are shuffled with per-epoch derived seeds,
// the shorter domain is extended by sampling its indices with replacement,
// and the lists are cut into index-paired full batches (short tail dropped).
// Metrics are per-epoch means of the per-step values; target accuracy is
// full-model inference against the epoch's last source batch.

#include <charconv>

#include "bcat/bank.hpp"
#include "bcat/checkpoint.hpp"
#include "bcat/data.hpp"
#include "bcat/model.hpp"
#include "bcat/objective.hpp"
#include "bcat/optim.hpp"

namespace bcat {

// Full-model evaluation pairs eval batches with the cycled reference batch,
// so the batch size is pinned to keep results reproducible.
constexpr int kEvalBatch = 64;

enum class OptimizerKind { sgd_momentum, adamw };

struct TrainConfig {
    int epochs = 20;
    int batch_size = 64;
    OptimizerKind optimizer = OptimizerKind::adamw;
    double lr = 1e-3;
    double momentum = 0.9;
    std::optional<double> weight_decay;  // default depends on optimizer
    double alpha = 0.8;
    double beta = 3.0;
    double temperature = 2.0;
    int k_neighbors = 5;
    double bank_momentum = 0.9;
    uint64_t seed = 1;
    std::optional<double> epsilon_fixed;  // overrides the epoch ramp
    bool source_only = false;             // drop target/transfer terms entirely
    ModelConfig model;

    double effective_weight_decay() const {
        if (weight_decay) return *weight_decay;
        return optimizer == OptimizerKind::sgd_momentum ? 5e-4 : 0.05;
    }

    void validate() const {
        model.validate();
        if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
        if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2");
        if (!(lr >= 0.0)) throw std::invalid_argument("config: lr must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("config: momentum must be in [0, 1)");
        if (weight_decay && !(*weight_decay >= 0.0)) throw std::invalid_argument("config: weight_decay must be >= 0");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("config: alpha must be in [0, 1]");
        if (!(beta >= 0.0)) throw std::invalid_argument("config: beta must be >= 0");
        if (!(temperature > 0.0)) throw std::invalid_argument("config: temperature must be > 0");
        if (k_neighbors < 1) throw std::invalid_argument("config: k_neighbors must be >= 1");
        if (!(bank_momentum >= 0.0 && bank_momentum < 1.0))
            throw std::invalid_argument("config: bank_momentum must be in [0, 1)");
        if (epsilon_fixed && !(*epsilon_fixed >= 0.0 && *epsilon_fixed <= 1.0))
            throw std::invalid_argument("config: epsilon must be in [0, 1]");
    }
};

// epsilon at epoch e of E, 1-indexed: e / E.
inline double epsilon_at(int epoch, int total_epochs) {
    if (total_epochs < 1 || epoch < 1 || epoch > total_epochs)
        throw std::invalid_argument("epsilon_at: epoch " + std::to_string(epoch) + " out of range [1, " +
                                    std::to_string(total_epochs) + "]");
    return static_cast<double>(epoch) / static_cast<double>(total_epochs);
}

struct EpochMetrics {
    int epoch = 0;
    double loss_cls_s = 0.0;
    double loss_cls_t = 0.0;
    double loss_transfer = 0.0;
    double loss_total = 0.0;
    double epsilon = 0.0;
    double mmd = 0.0;
    std::optional<double> target_acc;
};

struct TrainResult {
    ModelParams params;
    Tensor ref_source;  // last training batch's source half (raw images)
    std::optional<MemoryBank> bank;
    std::vector<EpochMetrics> metrics;
};

// ---------------------------------------------------------------- inference

namespace detail {
inline Tensor cycle_rows(const Tensor& t, int rows) {
    if (t.dim(0) == rows) return t;
    std::vector<int> idx(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) idx[static_cast<size_t>(i)] = i % t.dim(0);
    return gather_images(t, idx);
}
}  // namespace detail

inline Tensor infer_full_logits(const ModelParams& params, int n_heads, int patch, const Tensor& x_t,
                                const Tensor& ref_source) {
    if (ref_source.rank() != 4 || ref_source.dim(0) < 1)
        throw std::invalid_argument("infer_full: missing reference source batch");
    const Tensor ref = detail::cycle_rows(ref_source, x_t.dim(0));
    Graph g;
    auto pv = lift_params(g, params, false);
    Var sp = g.constant(patch_partition(ref, patch));
    Var tp = g.constant(patch_partition(x_t, patch));
    auto state = backbone_v(g, sp, tp, pv, n_heads);
    auto aug = pool_and_augment_v(g, state);
    return g.val(classify_v(g, aug.second, pv));
}

// Training-model inference: quadruple forward against a stored source
// reference batch, classify the target-dominant view.
inline std::vector<int> infer_full(const ModelParams& params, int n_heads, int patch, const Tensor& x_t,
                                   const Tensor& ref_source) {
    return argmax_rows(infer_full_logits(params, n_heads, patch, x_t, ref_source));
}

inline Tensor infer_dtf_logits(const ModelParams& params, int n_heads, int patch, const Tensor& x_t) {
    Graph g;
    auto pv = lift_params(g, params, false);
    Var tp = g.constant(patch_partition(x_t, patch));
    return g.val(classify_v(g, self_only_aug_v(g, tp, pv, n_heads), pv));
}

// Source-free inference: self-attention-only target forward, classifier fed
// the duplicated pooled target feature.
inline std::vector<int> infer_dtf(const ModelParams& params, int n_heads, int patch, const Tensor& x_t) {
    return argmax_rows(infer_dtf_logits(params, n_heads, patch, x_t));
}

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class;
    std::vector<int64_t> per_class_count;
    int n = 0;
};

enum class InferMode { full, dtf };

inline EvalResult evaluate_dataset(const ModelParams& params, int n_heads, int patch, const Dataset& data,
                                   InferMode mode, const Tensor* ref_source, int n_classes) {
    if (!data.has_labels()) throw std::invalid_argument("eval: dataset has no labels");
    EvalResult res;
    res.n = data.size();
    res.per_class.assign(static_cast<size_t>(n_classes), 0.0);
    res.per_class_count.assign(static_cast<size_t>(n_classes), 0);
    std::vector<double> correct(static_cast<size_t>(n_classes), 0.0);
    int64_t total_correct = 0;
    for (int start = 0; start < data.size(); start += kEvalBatch) {
        const int stop = std::min(data.size(), start + kEvalBatch);
        std::vector<int> idx;
        for (int i = start; i < stop; ++i) idx.push_back(i);
        const Tensor x = gather_images(data.images, idx);
        std::vector<int> pred;
        if (mode == InferMode::full) {
            if (ref_source == nullptr) throw std::invalid_argument("eval: full mode needs a reference source batch");
            pred = infer_full(params, n_heads, patch, x, *ref_source);
        } else {
            pred = infer_dtf(params, n_heads, patch, x);
        }
        for (size_t i = 0; i < idx.size(); ++i) {
            const int y = data.labels[static_cast<size_t>(idx[i])];
            if (y < 0 || y >= n_classes) throw std::invalid_argument("eval: label out of range");
            res.per_class_count[static_cast<size_t>(y)]++;
            if (pred[i] == y) {
                correct[static_cast<size_t>(y)] += 1.0;
                total_correct++;
            }
        }
    }
    for (int c = 0; c < n_classes; ++c)
        res.per_class[static_cast<size_t>(c)] =
            res.per_class_count[static_cast<size_t>(c)] == 0
                ? 0.0
                : correct[static_cast<size_t>(c)] / static_cast<double>(res.per_class_count[static_cast<size_t>(c)]);
    res.accuracy = static_cast<double>(total_correct) / static_cast<double>(res.n);
    return res;
}

// ------------------------------------------------------------- training loop

namespace detail {

inline std::vector<int> shuffled_indices(int n, uint64_t seed) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    fisher_yates(order, rng);
    return order;
}

// Extend the shorter list by sampling its entries with replacement.
inline void equalize_with_replacement(std::vector<int>& a, std::vector<int>& b, uint64_t seed) {
    if (a.size() == b.size()) return;
    std::vector<int>& shorter = a.size() < b.size() ? a : b;
    const size_t want = std::max(a.size(), b.size());
    Rng rng(seed);
    const size_t base = shorter.size();
    while (shorter.size() < want)
        shorter.push_back(shorter[static_cast<size_t>(rng.next_below(static_cast<uint64_t>(base)))]);
}

struct ParamRefs {
    std::vector<Tensor*> ptrs;
    std::vector<std::string> names;
};

inline ParamRefs collect_params(ModelParams& p) {
    ParamRefs r;
    for_each_param(p, [&](const std::string& name, Tensor& t) {
        r.ptrs.push_back(&t);
        r.names.push_back(name);
    });
    return r;
}

inline void apply_optimizer(const TrainConfig& cfg, const ParamRefs& refs, const std::vector<const Tensor*>& grads,
                            OptimizerState& state) {
    if (cfg.optimizer == OptimizerKind::sgd_momentum)
        sgd_momentum_step(refs.ptrs, grads, state, cfg.lr, cfg.momentum, cfg.effective_weight_decay());
    else
        adamw_step(refs.ptrs, grads, state, cfg.lr, 0.9, 0.999, 1e-8, cfg.effective_weight_decay());
}

// One no-gradient pass over the whole target set so the bank starts from
// real predictions instead of uniform rows. Source partners are sampled
// with replacement from their own stream; momentum 0 writes the rows as-is.
inline void prefill_bank(MemoryBank& bank, const Dataset& source, const Dataset& target, const TrainConfig& cfg,
                         const ModelParams& params) {
    Rng rng(derive_seed(cfg.seed, kStreamBankPrefill, 0));
    const int n_t = target.size();
    const int bsz = std::min(cfg.batch_size, n_t);
    for (int start = 0; start < n_t; start += bsz) {
        const int stop = std::min(n_t, start + bsz);
        std::vector<int> t_idx, s_idx;
        for (int i = start; i < stop; ++i) {
            t_idx.push_back(i);
            s_idx.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(source.size()))));
        }
        Graph g;
        auto pv = lift_params(g, params, false);
        Var sp = g.constant(patch_partition(gather_images(source.images, s_idx), cfg.model.patch_size));
        Var tp = g.constant(patch_partition(gather_images(target.images, t_idx), cfg.model.patch_size));
        auto state = backbone_v(g, sp, tp, pv, cfg.model.n_heads);
        auto aug = pool_and_augment_v(g, state);
        const Tensor feats = l2_normalize_rows(g.val(aug.second));
        const Tensor probs = softmax_rows(g.val(classify_v(g, aug.second, pv)));
        update_bank(bank, t_idx, feats, probs, 0.0);
    }
}

}  // namespace detail

inline TrainResult train_bcat(const Dataset& source, const Dataset& target, const TrainConfig& cfg) {
    cfg.validate();
    if (source.size() < 1 || target.size() < 1) throw std::invalid_argument("train: datasets must be nonempty");
    if (!source.has_labels()) throw std::invalid_argument("train: source dataset must be labeled");
    if (cfg.batch_size > source.size() || cfg.batch_size > target.size())
        throw std::invalid_argument("train: batch size " + std::to_string(cfg.batch_size) +
                                    " exceeds a dataset size");
    check_labels(source.labels, cfg.model.n_classes, "train");
    if (source.images.dim(1) != cfg.model.image_h || source.images.dim(2) != cfg.model.image_w ||
        source.images.dim(3) != cfg.model.channels || target.images.dim(1) != cfg.model.image_h ||
        target.images.dim(2) != cfg.model.image_w || target.images.dim(3) != cfg.model.channels)
        throw std::invalid_argument("train: dataset image dims do not match the model config");

    TrainResult result;
    result.params = init_model_params(cfg.model, cfg.seed);
    auto refs = detail::collect_params(result.params);
    OptimizerState opt = init_optimizer_state(refs.ptrs, cfg.optimizer == OptimizerKind::adamw);

    const int heads = cfg.model.n_heads;
    const int patch = cfg.model.patch_size;
    MemoryBank bank;
    if (!cfg.source_only) {
        bank = init_bank(target.size(), cfg.model.n_classes, 2 * cfg.model.d_model);
        if (cfg.k_neighbors > target.size() - 1)
            throw std::invalid_argument("train: k_neighbors must be < target size");
        detail::prefill_bank(bank, source, target, cfg, result.params);
    }

    std::vector<int> last_src_batch;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double eps = cfg.epsilon_fixed ? *cfg.epsilon_fixed : epsilon_at(epoch, cfg.epochs);
        auto src_order = detail::shuffled_indices(source.size(),
                                                  derive_seed(cfg.seed, kStreamShuffleSource, static_cast<uint64_t>(epoch)));
        auto tgt_order = detail::shuffled_indices(target.size(),
                                                  derive_seed(cfg.seed, kStreamShuffleTarget, static_cast<uint64_t>(epoch)));
        detail::equalize_with_replacement(src_order, tgt_order,
                                          derive_seed(cfg.seed, kStreamResample, static_cast<uint64_t>(epoch)));
        const int steps = static_cast<int>(src_order.size()) / cfg.batch_size;
        if (steps == 0) throw std::invalid_argument("train: no full batch fits an epoch");

        EpochMetrics em;
        em.epoch = epoch;
        em.epsilon = eps;
        for (int s = 0; s < steps; ++s) {
            const std::vector<int> s_idx(src_order.begin() + static_cast<int64_t>(s) * cfg.batch_size,
                                         src_order.begin() + static_cast<int64_t>(s + 1) * cfg.batch_size);
            const std::vector<int> t_idx(tgt_order.begin() + static_cast<int64_t>(s) * cfg.batch_size,
                                         tgt_order.begin() + static_cast<int64_t>(s + 1) * cfg.batch_size);
            const std::vector<int> y_s = gather_labels(source.labels, s_idx);

            Graph g;
            std::vector<int> leaf_ids;
            auto pv = lift_params(g, result.params, true, &leaf_ids);
            Var sp = g.constant(patch_partition(gather_images(source.images, s_idx), patch));
            Var tp = g.constant(patch_partition(gather_images(target.images, t_idx), patch));
            auto state = backbone_v(g, sp, tp, pv, heads);
            auto aug = pool_and_augment_v(g, state);
            Var logits_s = classify_v(g, aug.first, pv);
            Var cls_s = cross_entropy_v(g, logits_s, y_s);

            Var total = cls_s;
            LossReport report;
            Tensor tgt_feats, probs_t_val;
            if (!cfg.source_only) {
                Var logits_t = classify_v(g, aug.second, pv);
                Var probs_t = softmax_rows(logits_t);
                probs_t_val = g.val(probs_t);
                tgt_feats = l2_normalize_rows(g.val(aug.second));
                auto [q_hat, y_hat] = knn_pseudo_labels(bank, t_idx, tgt_feats, cfg.k_neighbors);
                (void)y_hat;
                Var cls_t = target_pseudo_loss_v(g, probs_t, q_hat);
                Var transfer = mmd2_v(g, aug.first, aug.second);
                total = bcat_total_v(cls_s, cls_t, transfer, eps, cfg.beta);
                report = bcat_total_loss(g.val(cls_s).data[0], g.val(cls_t).data[0], g.val(transfer).data[0], eps,
                                         cfg.beta);
            } else {
                report.cls_s = g.val(cls_s).data[0];
                report.total = report.cls_s;
                report.epsilon = eps;
                report.beta = cfg.beta;
            }

            auto grads = g.backward(total);
            std::vector<const Tensor*> grad_ptrs;
            grad_ptrs.reserve(leaf_ids.size());
            for (int id : leaf_ids) grad_ptrs.push_back(&grads.at(id));
            detail::apply_optimizer(cfg, refs, grad_ptrs, opt);

            if (!cfg.source_only) {
                // resampled batches can repeat a target index; the first
                // occurrence in the batch feeds that slot's update
                std::vector<int> uniq_slots, uniq_rows;
                std::set<int> seen;
                for (int i = 0; i < cfg.batch_size; ++i)
                    if (seen.insert(t_idx[static_cast<size_t>(i)]).second) {
                        uniq_slots.push_back(t_idx[static_cast<size_t>(i)]);
                        uniq_rows.push_back(i);
                    }
                update_bank(bank, uniq_slots, gather_images(tgt_feats, uniq_rows), gather_images(probs_t_val, uniq_rows),
                            cfg.bank_momentum);
            }

            em.loss_cls_s += report.cls_s;
            em.loss_cls_t += report.cls_t;
            em.loss_transfer += report.transfer;
            em.loss_total += report.total;
            em.mmd += report.transfer;
            last_src_batch = s_idx;
        }
        em.loss_cls_s /= steps;
        em.loss_cls_t /= steps;
        em.loss_transfer /= steps;
        em.loss_total /= steps;
        em.mmd /= steps;

        result.ref_source = gather_images(source.images, last_src_batch);
        if (target.has_labels()) {
            const auto ev = evaluate_dataset(result.params, heads, patch, target, InferMode::full, &result.ref_source,
                                             cfg.model.n_classes);
            em.target_acc = ev.accuracy;
        }
        result.metrics.push_back(em);
    }
    if (!cfg.source_only) result.bank = std::move(bank);
    return result;
}

// --------------------------------------------------------------- distillation

struct DistillEpochMetrics {
    int epoch = 0;
    double loss_kd = 0.0;
    double epsilon = 0.0;
    std::optional<double> target_acc;
};

struct DistillResult {
    ModelParams params;  // self-attention-only student
    std::vector<DistillEpochMetrics> metrics;
};

// Teacher: a trained checkpoint with its reference batch and memory bank.
// Student: initialized from teacher weights, trained with the softmax-T
// distillation loss against the teacher's full-model logits plus the
// epsilon-ramped hard term on bank pseudo-labels. The bank stays frozen.
inline DistillResult distill_student(const Checkpoint& teacher, const Dataset& target, const TrainConfig& cfg) {
    cfg.validate();
    if (!teacher.ref_source) throw std::invalid_argument("distill: teacher checkpoint is missing ref_source");
    if (!teacher.bank) throw std::invalid_argument("distill: teacher checkpoint is missing the memory bank");
    if (target.size() < 1) throw std::invalid_argument("distill: target dataset must be nonempty");
    if (cfg.batch_size > target.size()) throw std::invalid_argument("distill: batch size exceeds target size");
    if (teacher.bank->size() != target.size())
        throw std::invalid_argument("distill: bank size " + std::to_string(teacher.bank->size()) +
                                    " does not match target size " + std::to_string(target.size()));
    if (cfg.k_neighbors > teacher.bank->size() - 1)
        throw std::invalid_argument("distill: k_neighbors must be < bank size");

    const int heads = teacher.n_heads;
    const int patch = cfg.model.patch_size;

    DistillResult result;
    result.params = teacher.params;
    auto refs = detail::collect_params(result.params);
    OptimizerState opt = init_optimizer_state(refs.ptrs, cfg.optimizer == OptimizerKind::adamw);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double eps = cfg.epsilon_fixed ? *cfg.epsilon_fixed : epsilon_at(epoch, cfg.epochs);
        auto order = detail::shuffled_indices(target.size(),
                                              derive_seed(cfg.seed, kStreamShuffleTarget, static_cast<uint64_t>(epoch)));
        const int steps = static_cast<int>(order.size()) / cfg.batch_size;
        if (steps == 0) throw std::invalid_argument("distill: no full batch fits an epoch");

        DistillEpochMetrics em;
        em.epoch = epoch;
        em.epsilon = eps;
        for (int s = 0; s < steps; ++s) {
            const std::vector<int> t_idx(order.begin() + static_cast<int64_t>(s) * cfg.batch_size,
                                         order.begin() + static_cast<int64_t>(s + 1) * cfg.batch_size);
            const Tensor x_t = gather_images(target.images, t_idx);

            // Teacher pass: full-model logits plus bank pseudo-labels.
            Tensor teacher_logits;
            std::vector<int> y_hat;
            {
                Graph g;
                auto pv = lift_params(g, teacher.params, false);
                Var sp = g.constant(patch_partition(detail::cycle_rows(*teacher.ref_source, x_t.dim(0)), patch));
                Var tp = g.constant(patch_partition(x_t, patch));
                auto state = backbone_v(g, sp, tp, pv, heads);
                auto aug = pool_and_augment_v(g, state);
                teacher_logits = g.val(classify_v(g, aug.second, pv));
                const Tensor feats = l2_normalize_rows(g.val(aug.second));
                auto pl = knn_pseudo_labels(*teacher.bank, t_idx, feats, cfg.k_neighbors);
                y_hat = std::move(pl.second);
            }

            Graph g;
            std::vector<int> leaf_ids;
            auto pv = lift_params(g, result.params, true, &leaf_ids);
            Var tp = g.constant(patch_partition(x_t, patch));
            Var logits_student = classify_v(g, self_only_aug_v(g, tp, pv, heads), pv);
            Var loss = kd_loss_v(g, teacher_logits, logits_student, y_hat, cfg.alpha, cfg.temperature, eps);
            em.loss_kd += g.val(loss).data[0];

            auto grads = g.backward(loss);
            std::vector<const Tensor*> grad_ptrs;
            grad_ptrs.reserve(leaf_ids.size());
            for (int id : leaf_ids) grad_ptrs.push_back(&grads.at(id));
            detail::apply_optimizer(cfg, refs, grad_ptrs, opt);
        }
        em.loss_kd /= steps;
        if (target.has_labels()) {
            const auto ev = evaluate_dataset(result.params, heads, patch, target, InferMode::dtf, nullptr,
                                             teacher.params.cls_w2.dim(1));
            em.target_acc = ev.accuracy;
        }
        result.metrics.push_back(em);
    }
    return result;
}

// ------------------------------------------------------------------- metrics

// Shortest round-trip decimal for a finite double (JSON-safe, deterministic).
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string metrics_jsonl(const std::vector<EpochMetrics>& metrics) {
    std::string out;
    for (const auto& m : metrics) {
        out += "{\"epoch\":" + std::to_string(m.epoch);
        out += ",\"loss_cls_s\":" + format_double(m.loss_cls_s);
        out += ",\"loss_cls_t\":" + format_double(m.loss_cls_t);
        out += ",\"loss_transfer\":" + format_double(m.loss_transfer);
        out += ",\"loss_total\":" + format_double(m.loss_total);
        out += ",\"epsilon\":" + format_double(m.epsilon);
        out += ",\"mmd\":" + format_double(m.mmd);
        if (m.target_acc) out += ",\"target_acc\":" + format_double(*m.target_acc);
        out += "}\n";
    }
    return out;
}

inline std::string distill_metrics_jsonl(const std::vector<DistillEpochMetrics>& metrics) {
    std::string out;
    for (const auto& m : metrics) {
        out += "{\"epoch\":" + std::to_string(m.epoch);
        out += ",\"loss_kd\":" + format_double(m.loss_kd);
        out += ",\"epsilon\":" + format_double(m.epsilon);
        if (m.target_acc) out += ",\"target_acc\":" + format_double(*m.target_acc);
        out += "}\n";
    }
    return out;
}

}  // namespace bcat
