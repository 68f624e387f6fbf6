#pragma once

// Attention-map export: one sample's self-attention weights at a chosen
// block, averaged over query positions (and heads, if requested), reshaped
// to the patch grid, nearest-neighbor upscaled to image size and min-max
// normalized into a binary PGM (P5, maxval 255).

#include "bcat/data.hpp"
#include "bcat/model.hpp"

namespace bcat {

struct AttnMapRequest {
    int sample = 0;
    int block = 0;
    int head = -1;  // -1: mean over heads
};

// Returns image_h x image_w bytes, row-major.
inline std::vector<uint8_t> render_attn_map(const ModelParams& params, const ModelConfig& cfg, const Tensor& images,
                                            const AttnMapRequest& req) {
    cfg.validate();
    if (req.sample < 0 || req.sample >= images.dim(0))
        throw std::invalid_argument("attn_map: sample index " + std::to_string(req.sample) + " out of range [0, " +
                                    std::to_string(images.dim(0)) + ")");
    if (req.block < 0 || req.block >= static_cast<int>(params.blocks.size()))
        throw std::invalid_argument("attn_map: block " + std::to_string(req.block) + " out of range [0, " +
                                    std::to_string(params.blocks.size()) + ")");
    if (req.head != -1 && (req.head < 0 || req.head >= cfg.n_heads))
        throw std::invalid_argument("attn_map: head " + std::to_string(req.head) + " out of range [0, " +
                                    std::to_string(cfg.n_heads) + ")");

    // Run the sample down the self-attention path to the requested block and
    // grab that block's weights.
    const Tensor x = gather_images(images, {req.sample});
    Graph g;
    auto pv = lift_params(g, params, false);
    Var z = embed_v(g, g.constant(patch_partition(x, cfg.patch_size)), pv);
    Var weights{nullptr, -1};
    for (int i = 0; i <= req.block; ++i) {
        const auto& blk = pv.blocks[static_cast<size_t>(i)];
        auto ln1 = [&](Var v) { return layer_norm(v, blk.ln1_g, blk.ln1_b, kLayerNormEps); };
        auto ln2 = [&](Var v) { return layer_norm(v, blk.ln2_g, blk.ln2_b, kLayerNormEps); };
        auto parts = detail::mha(g, ln1(z), ln1(z), blk, cfg.n_heads);
        if (i == req.block) weights = parts.weights;
        Var hat = add(parts.out, z);
        z = add(detail::block_mlp(g, ln2(hat), blk), hat);
    }

    // [1, heads, N, N] -> mean over query positions -> [heads, N].
    const Tensor w = g.val(weights);
    const int heads = cfg.n_heads, n = cfg.n_tokens();
    std::vector<double> per_key(static_cast<size_t>(n), 0.0);
    const int h_lo = req.head == -1 ? 0 : req.head;
    const int h_hi = req.head == -1 ? heads : req.head + 1;
    for (int h = h_lo; h < h_hi; ++h)
        for (int q = 0; q < n; ++q)
            for (int kk = 0; kk < n; ++kk)
                per_key[static_cast<size_t>(kk)] += w.data[(static_cast<int64_t>(h) * n + q) * n + kk];
    const double norm = static_cast<double>((h_hi - h_lo)) * n;
    for (auto& v : per_key) v /= norm;

    double lo = per_key[0], hi = per_key[0];
    for (double v : per_key) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;

    const int grid_w = cfg.image_w / cfg.patch_size;
    std::vector<uint8_t> img(static_cast<size_t>(cfg.image_h) * cfg.image_w);
    for (int r = 0; r < cfg.image_h; ++r)
        for (int c = 0; c < cfg.image_w; ++c) {
            const int pidx = (r / cfg.patch_size) * grid_w + (c / cfg.patch_size);
            const double u = span > 0.0 ? (per_key[static_cast<size_t>(pidx)] - lo) / span : 0.5;
            img[static_cast<size_t>(r) * cfg.image_w + static_cast<size_t>(c)] =
                static_cast<uint8_t>(std::lround(u * 255.0));
        }
    return img;
}

inline std::string encode_pgm(int width, int height, const std::vector<uint8_t>& pixels) {
    if (static_cast<size_t>(width) * static_cast<size_t>(height) != pixels.size())
        throw std::invalid_argument("pgm: pixel count does not match dimensions");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    return out;
}

inline void write_pgm(const std::string& path, int width, int height, const std::vector<uint8_t>& pixels) {
    detail::write_file(path, encode_pgm(width, height, pixels), "pgm");
}

}  // namespace bcat
