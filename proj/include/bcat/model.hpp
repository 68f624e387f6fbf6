#pragma once

// The quadruple-branch transformer: patch partition, multi-head self- and
// cross-attention over one shared per-block parameter set, the four-branch
// block update, the stacked backbone, mean-pool + concat feature
// augmentation, and the two-layer classifier head.
//
// One block level owns exactly one BlockParams; all four branches (source
// self, target->source cross, source->target cross, target self) read it.
// Per branch and level, with LN1/LN2 the block's two norms:
//
//   zhat = attn(LN1(q_src), LN1(kv_src)) + z_prev      (residual)
//   z    = mlp(LN2(zhat)) + zhat
//
// where the self branches attend to themselves, the target->source branch
// takes queries from LN1(Z_t) and keys/values from LN1(Z_s), and the
// source->target branch mirrors it. No positional embeddings; tokens are
// distinguishable by content at this scale.

#include "bcat/autodiff.hpp"
#include "bcat/rng.hpp"

namespace bcat {

constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    int image_h = 16;
    int image_w = 16;
    int channels = 1;
    int patch_size = 4;
    int d_model = 32;
    int n_heads = 4;
    int n_blocks = 2;
    int mlp_ratio = 2;
    int n_classes = 4;
    int classifier_hidden = 64;

    int n_tokens() const { return (image_h / patch_size) * (image_w / patch_size); }
    int token_dim() const { return channels * patch_size * patch_size; }
    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (image_h < 1 || image_w < 1 || channels < 1) throw std::invalid_argument("model: image dims must be >= 1");
        if (patch_size < 1 || image_h % patch_size != 0 || image_w % patch_size != 0)
            throw std::invalid_argument("model: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                        " not divisible by patch size " + std::to_string(patch_size));
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw std::invalid_argument("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                        std::to_string(n_heads));
        if (n_blocks < 0) throw std::invalid_argument("model: n_blocks must be >= 0");
        if (mlp_ratio < 1) throw std::invalid_argument("model: mlp_ratio must be >= 1");
        if (n_classes < 2) throw std::invalid_argument("model: n_classes must be >= 2");
        if (classifier_hidden < 1) throw std::invalid_argument("model: classifier_hidden must be >= 1");
    }
};

struct BlockParams {
    Tensor wq, wk, wv, wo;          // [d_model, d_model]
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // [d_model]
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelParams {
    Tensor embed_w, embed_b;  // [token_dim, d_model], [d_model]
    std::vector<BlockParams> blocks;
    Tensor cls_w1, cls_b1, cls_w2, cls_b2;  // [2*d_model, hidden] -> [hidden, K]
};

// Canonical parameter order; everything that walks parameters (init,
// optimizers, checkpoints, graph lifting) uses this.
template <typename P, typename F>
void for_each_param(P& p, F f) {
    f("embed.w", p.embed_w);
    f("embed.b", p.embed_b);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string pre = "block" + std::to_string(i) + ".";
        auto& b = p.blocks[i];
        f(pre + "wq", b.wq);
        f(pre + "wk", b.wk);
        f(pre + "wv", b.wv);
        f(pre + "wo", b.wo);
        f(pre + "ln1.g", b.ln1_g);
        f(pre + "ln1.b", b.ln1_b);
        f(pre + "ln2.g", b.ln2_g);
        f(pre + "ln2.b", b.ln2_b);
        f(pre + "mlp.w1", b.mlp_w1);
        f(pre + "mlp.b1", b.mlp_b1);
        f(pre + "mlp.w2", b.mlp_w2);
        f(pre + "mlp.b2", b.mlp_b2);
    }
    f("cls.w1", p.cls_w1);
    f("cls.b1", p.cls_b1);
    f("cls.w2", p.cls_w2);
    f("cls.b2", p.cls_b2);
}

inline int param_count(const ModelParams& p) {
    int n = 0;
    for_each_param(p, [&](const std::string&, const Tensor&) { ++n; });
    return n;
}

namespace detail {
inline Tensor glorot_uniform(int fan_in, int fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (auto& v : t.data) v = rng.next_uniform(a);
    return t;
}
}  // namespace detail

// Weights ~ uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)), LN gamma 1 /
// beta 0, biases 0. Draw order is the canonical parameter order, row-major
// within each tensor, from one generator seeded off (seed, kStreamParamInit).
inline ModelParams init_model_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, kStreamParamInit, 0));
    const int d = cfg.d_model;
    ModelParams p;
    p.embed_w = detail::glorot_uniform(cfg.token_dim(), d, rng);
    p.embed_b = Tensor({d});
    p.blocks.resize(static_cast<size_t>(cfg.n_blocks));
    for (auto& b : p.blocks) {
        b.wq = detail::glorot_uniform(d, d, rng);
        b.wk = detail::glorot_uniform(d, d, rng);
        b.wv = detail::glorot_uniform(d, d, rng);
        b.wo = detail::glorot_uniform(d, d, rng);
        b.ln1_g = Tensor::full({d}, 1.0);
        b.ln1_b = Tensor({d});
        b.ln2_g = Tensor::full({d}, 1.0);
        b.ln2_b = Tensor({d});
        b.mlp_w1 = detail::glorot_uniform(d, cfg.mlp_ratio * d, rng);
        b.mlp_b1 = Tensor({cfg.mlp_ratio * d});
        b.mlp_w2 = detail::glorot_uniform(cfg.mlp_ratio * d, d, rng);
        b.mlp_b2 = Tensor({d});
    }
    p.cls_w1 = detail::glorot_uniform(2 * d, cfg.classifier_hidden, rng);
    p.cls_b1 = Tensor({cfg.classifier_hidden});
    p.cls_w2 = detail::glorot_uniform(cfg.classifier_hidden, cfg.n_classes, rng);
    p.cls_b2 = Tensor({cfg.n_classes});
    return p;
}

// ------------------------------------------------------------ patch partition

// images [b, H, W, C] -> [b, N, C*P*P]; patches in row-major patch order,
// each flattened in (row, col, channel) order.
inline Tensor patch_partition(const Tensor& images, int patch) {
    if (images.rank() != 4)
        throw std::invalid_argument("patch_partition: expected [b, H, W, C], got " + shape_str(images.shape));
    const int b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    if (patch < 1 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("patch_partition: image " + std::to_string(h) + "x" + std::to_string(w) +
                                    " not divisible by patch size " + std::to_string(patch));
    const int ph = h / patch, pw = w / patch;
    const int n = ph * pw, pd = c * patch * patch;
    Tensor out({b, n, pd});
    for (int bi = 0; bi < b; ++bi)
        for (int pr = 0; pr < ph; ++pr)
            for (int pc = 0; pc < pw; ++pc) {
                const int pidx = pr * pw + pc;
                double* dst = out.data.data() + (static_cast<int64_t>(bi) * n + pidx) * pd;
                for (int r = 0; r < patch; ++r)
                    for (int cc = 0; cc < patch; ++cc)
                        for (int ch = 0; ch < c; ++ch)
                            *dst++ = images.data[((static_cast<int64_t>(bi) * h + (pr * patch + r)) * w +
                                                  (pc * patch + cc)) * c + ch];
            }
    return out;
}

// ------------------------------------------------------------- graph forward

struct BlockVars {
    Var wq, wk, wv, wo;
    Var ln1_g, ln1_b, ln2_g, ln2_b;
    Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ParamVars {
    Var embed_w, embed_b;
    std::vector<BlockVars> blocks;
    Var cls_w1, cls_b1, cls_w2, cls_b2;
};

// Lift parameters into a graph as leaves, canonical order. When
// `requires_grad`, the ids (same order) are collected so optimizer steps can
// map backward()'s gradient map back onto the parameter list.
inline ParamVars lift_params(Graph& g, const ModelParams& p, bool requires_grad, std::vector<int>* leaf_ids = nullptr) {
    ParamVars pv;
    pv.blocks.resize(p.blocks.size());
    std::vector<Var*> slots = {&pv.embed_w, &pv.embed_b};
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = pv.blocks[i];
        for (Var* v : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.mlp_w1, &b.mlp_b1,
                       &b.mlp_w2, &b.mlp_b2})
            slots.push_back(v);
    }
    for (Var* v : {&pv.cls_w1, &pv.cls_b1, &pv.cls_w2, &pv.cls_b2}) slots.push_back(v);

    size_t k = 0;
    for_each_param(const_cast<ModelParams&>(p), [&](const std::string&, Tensor& t) {
        Tensor copy = t;
        copy.requires_grad = requires_grad;
        copy.grad.clear();
        *slots[k] = g.leaf(std::move(copy));
        if (leaf_ids) leaf_ids->push_back(slots[k]->id);
        ++k;
    });
    return pv;
}

struct BranchStateV {
    Var zs, zts, zst, zt;  // source, target->source, source->target, target
};

struct BranchState {
    Tensor zs, zts, zst, zt;
};

namespace detail {

struct AttnParts {
    Var out;      // [b, N, d_model], after the output projection
    Var weights;  // [b, heads, N, N], row-stochastic
};

// Multi-head attention, queries from q_tok and keys/values from kv_tok.
// Self-attention is the q_tok == kv_tok case and shares this exact path.
inline AttnParts mha(Graph& g, Var q_tok, Var kv_tok, const BlockVars& p, int n_heads) {
    const auto& qs = g.val(q_tok).shape;
    if (qs.size() != 3) throw std::invalid_argument("attention: expected [b, N, d_model], got " + shape_str(qs));
    const int b = qs[0], n = qs[1], d = qs[2];
    const auto& ks = g.val(kv_tok).shape;
    if (ks.size() != 3 || ks[0] != b || ks[2] != d)
        throw std::invalid_argument("attention: query/key token shapes disagree: " + shape_str(qs) + " vs " +
                                    shape_str(ks));
    const int nk = ks[1];
    if (d % n_heads != 0) throw std::invalid_argument("attention: d_model not divisible by head count");
    const int hd = d / n_heads;

    auto split = [&](Var x, int tokens) {
        return permute(reshape(x, {b, tokens, n_heads, hd}), {0, 2, 1, 3});  // [b, h, tokens, hd]
    };
    Var q = split(matmul(q_tok, p.wq), n);
    Var k = split(matmul(kv_tok, p.wk), nk);
    Var v = split(matmul(kv_tok, p.wv), nk);

    Var logits = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
    Var w = softmax_rows(logits);                       // [b, h, N, Nk]
    Var o = matmul(w, v);                               // [b, h, N, hd]
    Var merged = reshape(permute(o, {0, 2, 1, 3}), {b, n, d});
    return {matmul(merged, p.wo), w};
}

inline Var block_mlp(Graph& g, Var x, const BlockVars& p) {
    (void)g;
    Var h = gelu(add(matmul(x, p.mlp_w1), p.mlp_b1));
    return add(matmul(h, p.mlp_w2), p.mlp_b2);
}

}  // namespace detail

inline Var attn_cross_v(Graph& g, Var q_tok, Var kv_tok, const BlockVars& p, int n_heads) {
    return detail::mha(g, q_tok, kv_tok, p, n_heads).out;
}

inline Var attn_self_v(Graph& g, Var x, const BlockVars& p, int n_heads) {
    return detail::mha(g, x, x, p, n_heads).out;
}

inline Var attn_weights_v(Graph& g, Var q_tok, Var kv_tok, const BlockVars& p, int n_heads) {
    return detail::mha(g, q_tok, kv_tok, p, n_heads).weights;
}

inline BranchStateV quadruple_block_v(Graph& g, const BranchStateV& s, const BlockVars& p, int n_heads) {
    auto ln1 = [&](Var x) { return layer_norm(x, p.ln1_g, p.ln1_b, kLayerNormEps); };
    auto ln2 = [&](Var x) { return layer_norm(x, p.ln2_g, p.ln2_b, kLayerNormEps); };
    Var ln_s = ln1(s.zs);
    Var ln_t = ln1(s.zt);

    Var hat_zs = add(detail::mha(g, ln_s, ln_s, p, n_heads).out, s.zs);
    Var zs = add(detail::block_mlp(g, ln2(hat_zs), p), hat_zs);

    Var hat_zts = add(detail::mha(g, ln_t, ln_s, p, n_heads).out, s.zts);
    Var zts = add(detail::block_mlp(g, ln2(hat_zts), p), hat_zts);

    Var hat_zst = add(detail::mha(g, ln_s, ln_t, p, n_heads).out, s.zst);
    Var zst = add(detail::block_mlp(g, ln2(hat_zst), p), hat_zst);

    Var hat_zt = add(detail::mha(g, ln_t, ln_t, p, n_heads).out, s.zt);
    Var zt = add(detail::block_mlp(g, ln2(hat_zt), p), hat_zt);

    return {zs, zts, zst, zt};
}

inline Var embed_v(Graph& g, Var patches, const ParamVars& p) {
    (void)g;
    return add(matmul(patches, p.embed_w), p.embed_b);
}

// Z_s^0 = Z_{t->s}^0 = embedded source patches, Z_t^0 = Z_{s->t}^0 =
// embedded target patches, then the stacked blocks.
inline BranchStateV backbone_v(Graph& g, Var src_patches, Var tgt_patches, const ParamVars& p, int n_heads) {
    const auto& ss = g.val(src_patches).shape;
    const auto& ts = g.val(tgt_patches).shape;
    if (ss != ts)
        throw std::invalid_argument("backbone: source/target batches must pair up, got " + shape_str(ss) + " vs " +
                                    shape_str(ts));
    Var es = embed_v(g, src_patches, p);
    Var et = embed_v(g, tgt_patches, p);
    BranchStateV s{es, es, et, et};
    for (const auto& blk : p.blocks) s = quadruple_block_v(g, s, blk, n_heads);
    return s;
}

// Mean over token positions, then [pool(Z_s) || pool(Z_{t->s})] and
// [pool(Z_t) || pool(Z_{s->t})].
inline std::pair<Var, Var> pool_and_augment_v(Graph& g, const BranchStateV& s) {
    (void)g;
    Var ps = mean_axis(s.zs, 1);
    Var pts = mean_axis(s.zts, 1);
    Var pt = mean_axis(s.zt, 1);
    Var pst = mean_axis(s.zst, 1);
    return {concat_last(ps, pts), concat_last(pt, pst)};
}

inline Var classify_v(Graph& g, Var aug, const ParamVars& p) {
    (void)g;
    Var h = gelu(add(matmul(aug, p.cls_w1), p.cls_b1));
    return add(matmul(h, p.cls_w2), p.cls_b2);
}

// Self-attention-only stack over one token stream (the source-free student /
// DTF path), same parameters and layout as one branch of the full model.
inline Var self_only_tokens_v(Graph& g, Var patches, const ParamVars& p, int n_heads) {
    Var z = embed_v(g, patches, p);
    for (const auto& blk : p.blocks) {
        auto ln1 = [&](Var x) { return layer_norm(x, blk.ln1_g, blk.ln1_b, kLayerNormEps); };
        auto ln2 = [&](Var x) { return layer_norm(x, blk.ln2_g, blk.ln2_b, kLayerNormEps); };
        Var hat = add(detail::mha(g, ln1(z), ln1(z), blk, n_heads).out, z);
        z = add(detail::block_mlp(g, ln2(hat), blk), hat);
    }
    return z;
}

// [pool(Z_t) || pool(Z_t)] for the self-only stack.
inline Var self_only_aug_v(Graph& g, Var patches, const ParamVars& p, int n_heads) {
    Var pooled = mean_axis(self_only_tokens_v(g, patches, p, n_heads), 1);
    return concat_last(pooled, pooled);
}

// ------------------------------------------------------------ plain wrappers
// Spec-level entry points on plain tensors; each builds a throwaway graph so
// eager and recorded execution share one numeric path.

namespace detail {
inline BlockVars lift_block(Graph& g, const BlockParams& p) {
    BlockVars b;
    b.wq = g.constant(p.wq);
    b.wk = g.constant(p.wk);
    b.wv = g.constant(p.wv);
    b.wo = g.constant(p.wo);
    b.ln1_g = g.constant(p.ln1_g);
    b.ln1_b = g.constant(p.ln1_b);
    b.ln2_g = g.constant(p.ln2_g);
    b.ln2_b = g.constant(p.ln2_b);
    b.mlp_w1 = g.constant(p.mlp_w1);
    b.mlp_b1 = g.constant(p.mlp_b1);
    b.mlp_w2 = g.constant(p.mlp_w2);
    b.mlp_b2 = g.constant(p.mlp_b2);
    return b;
}
}  // namespace detail

inline Tensor attn_self(const Tensor& x, const BlockParams& p, int n_heads) {
    Graph g;
    Var xv = g.constant(x);
    return g.val(attn_self_v(g, xv, detail::lift_block(g, p), n_heads));
}

inline Tensor attn_cross(const Tensor& q_tok, const Tensor& kv_tok, const BlockParams& p, int n_heads) {
    Graph g;
    Var qv = g.constant(q_tok);
    Var kv = g.constant(kv_tok);
    return g.val(attn_cross_v(g, qv, kv, detail::lift_block(g, p), n_heads));
}

inline Tensor attn_weights(const Tensor& x, const BlockParams& p, int n_heads) {
    Graph g;
    Var xv = g.constant(x);
    return g.val(attn_weights_v(g, xv, xv, detail::lift_block(g, p), n_heads));
}

inline Tensor attn_weights(const Tensor& q_tok, const Tensor& kv_tok, const BlockParams& p, int n_heads) {
    Graph g;
    Var qv = g.constant(q_tok);
    Var kv = g.constant(kv_tok);
    return g.val(attn_weights_v(g, qv, kv, detail::lift_block(g, p), n_heads));
}

inline BranchState quadruple_block_forward(const BranchState& s, const BlockParams& p, int n_heads) {
    Graph g;
    BranchStateV sv{g.constant(s.zs), g.constant(s.zts), g.constant(s.zst), g.constant(s.zt)};
    auto out = quadruple_block_v(g, sv, detail::lift_block(g, p), n_heads);
    return {g.val(out.zs), g.val(out.zts), g.val(out.zst), g.val(out.zt)};
}

inline BranchState backbone_forward(const Tensor& src_patches, const Tensor& tgt_patches, const ModelParams& p,
                                    int n_heads) {
    Graph g;
    auto pv = lift_params(g, p, false);
    auto out = backbone_v(g, g.constant(src_patches), g.constant(tgt_patches), pv, n_heads);
    return {g.val(out.zs), g.val(out.zts), g.val(out.zst), g.val(out.zt)};
}

inline std::pair<Tensor, Tensor> pool_and_augment(const BranchState& s) {
    Tensor src_aug = concat_last(mean_axis(s.zs, 1), mean_axis(s.zts, 1));
    Tensor tgt_aug = concat_last(mean_axis(s.zt, 1), mean_axis(s.zst, 1));
    return {src_aug, tgt_aug};
}

inline Tensor classify(const Tensor& aug, const ModelParams& p) {
    if (aug.last_dim() != p.cls_w1.dim(0))
        throw std::invalid_argument("classify: input width " + std::to_string(aug.last_dim()) +
                                    " does not match classifier width " + std::to_string(p.cls_w1.dim(0)));
    Tensor h = gelu(add(matmul(aug, p.cls_w1), p.cls_b1));
    return add(matmul(h, p.cls_w2), p.cls_b2);
}

}  // namespace bcat
