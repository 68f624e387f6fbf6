#pragma once

// BCKP named-tensor checkpoint (all integers little-endian):
//   magic "BCKP" | u32 version=1 | u32 tensor_count |
//   per tensor: u32 name_len | name bytes | u32 rank | u32 dims[rank] |
//               f64 payload (little-endian)
//
// Canonical names, written in this order:
//   embed.w embed.b
//   block{i}.{wq,wk,wv,wo,ln1.g,ln1.b,ln2.g,ln2.b,mlp.w1,mlp.b1,mlp.w2,mlp.b2}
//   cls.{w1,b1,w2,b2}
//   meta                      [1], the attention head count (needed to rebuild
//                             the model; not recoverable from weight shapes)
//   ref_source                optional, persisted reference source batch
//                             [b, H, W, C] (absent from student checkpoints)
//   bank.features bank.probs  optional, persisted memory bank
//
// Loading is strict: unknown names, missing required tensors, duplicate
// names and shape inconsistencies are errors naming the tensor.

#include <cctype>
#include <map>
#include <optional>
#include <set>

#include "bcat/bank.hpp"
#include "bcat/data.hpp"
#include "bcat/model.hpp"

namespace bcat {

struct Checkpoint {
    ModelParams params;
    int n_heads = 1;
    std::optional<Tensor> ref_source;
    std::optional<MemoryBank> bank;
    std::set<std::string> loaded_names;  // audit of what a load materialized
};

namespace detail {

inline void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) put_u32(out, static_cast<uint32_t>(d));
    for (double v : t.data) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::vector<std::pair<std::string, const Tensor*>> entries;
    for_each_param(const_cast<ModelParams&>(ck.params),
                   [&](const std::string& name, Tensor& t) { entries.emplace_back(name, &t); });
    Tensor meta = Tensor::scalar(static_cast<double>(ck.n_heads));
    entries.emplace_back("meta", &meta);
    if (ck.ref_source) entries.emplace_back("ref_source", &*ck.ref_source);
    if (ck.bank) {
        entries.emplace_back("bank.features", &ck.bank->features);
        entries.emplace_back("bank.probs", &ck.bank->probs);
    }
    std::string out;
    out += "BCKP";
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) detail::put_tensor(out, name, *t);
    return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    detail::write_file(path, encode_checkpoint(ck), "bckp");
}

namespace detail {

inline bool known_checkpoint_name(const std::string& name) {
    static const std::set<std::string> fixed = {"embed.w", "embed.b", "cls.w1", "cls.b1", "cls.w2",
                                                "cls.b2",  "meta",    "ref_source", "bank.features", "bank.probs"};
    if (fixed.count(name)) return true;
    if (name.rfind("block", 0) != 0) return false;
    const size_t dot = name.find('.');
    if (dot == std::string::npos || dot <= 5) return false;
    for (size_t i = 5; i < dot; ++i)
        if (!std::isdigit(static_cast<unsigned char>(name[i]))) return false;
    static const std::set<std::string> fields = {"wq", "wk", "wv", "wo", "ln1.g", "ln1.b", "ln2.g", "ln2.b",
                                                 "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"};
    return fields.count(name.substr(dot + 1)) > 0;
}

inline const Tensor& need_tensor(const std::map<std::string, Tensor>& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw std::runtime_error("bckp: missing tensor " + name);
    return it->second;
}

inline void need_shape(const Tensor& t, const std::vector<int>& shape, const std::string& name) {
    if (t.shape != shape)
        throw std::runtime_error("bckp: tensor " + name + " has shape " + shape_str(t.shape) + ", expected " +
                                 shape_str(shape));
}

}  // namespace detail

// With materialize_ref_source false (the source-free inference path) the
// ref_source payload is skipped over, never decoded, and never appears in
// loaded_names.
inline Checkpoint decode_checkpoint(const std::string& bytes, bool materialize_ref_source = true) {
    detail::ByteReader r(bytes, "bckp");
    if (r.bytes(4) != "BCKP") throw std::runtime_error("bckp: bad magic");
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("bckp: unsupported version " + std::to_string(version));
    const uint32_t count = r.u32();
    std::map<std::string, Tensor> tensors;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        if (!detail::known_checkpoint_name(name)) throw std::runtime_error("bckp: unknown tensor " + name);
        const uint32_t rank = r.u32();
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        if (name == "ref_source" && !materialize_ref_source) {
            r.bytes(static_cast<size_t>(numel_of(shape)) * 8);
            continue;
        }
        Tensor t(shape);
        for (auto& v : t.data) v = r.f64();
        if (!tensors.emplace(name, std::move(t)).second) throw std::runtime_error("bckp: duplicate tensor " + name);
    }
    if (!r.at_end()) throw std::runtime_error("bckp: trailing bytes");

    Checkpoint ck;
    for (const auto& [name, t] : tensors) ck.loaded_names.insert(name);

    const Tensor& meta = detail::need_tensor(tensors, "meta");
    detail::need_shape(meta, {1}, "meta");
    ck.n_heads = static_cast<int>(meta.data[0]);
    if (ck.n_heads < 1) throw std::runtime_error("bckp: meta head count must be >= 1");

    const Tensor& ew = detail::need_tensor(tensors, "embed.w");
    if (ew.rank() != 2) throw std::runtime_error("bckp: tensor embed.w must be rank 2");
    const int d = ew.dim(1);
    if (d % ck.n_heads != 0) throw std::runtime_error("bckp: d_model not divisible by meta head count");
    ck.params.embed_w = ew;
    ck.params.embed_b = detail::need_tensor(tensors, "embed.b");
    detail::need_shape(ck.params.embed_b, {d}, "embed.b");

    int n_blocks = 0;
    while (tensors.count("block" + std::to_string(n_blocks) + ".wq")) ++n_blocks;
    ck.params.blocks.resize(static_cast<size_t>(n_blocks));
    for (int i = 0; i < n_blocks; ++i) {
        const std::string pre = "block" + std::to_string(i) + ".";
        auto& b = ck.params.blocks[static_cast<size_t>(i)];
        b.wq = detail::need_tensor(tensors, pre + "wq");
        b.wk = detail::need_tensor(tensors, pre + "wk");
        b.wv = detail::need_tensor(tensors, pre + "wv");
        b.wo = detail::need_tensor(tensors, pre + "wo");
        for (const auto* w : {&b.wq, &b.wk, &b.wv, &b.wo}) detail::need_shape(*w, {d, d}, pre + "w*");
        b.ln1_g = detail::need_tensor(tensors, pre + "ln1.g");
        b.ln1_b = detail::need_tensor(tensors, pre + "ln1.b");
        b.ln2_g = detail::need_tensor(tensors, pre + "ln2.g");
        b.ln2_b = detail::need_tensor(tensors, pre + "ln2.b");
        for (const auto* w : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b}) detail::need_shape(*w, {d}, pre + "ln*");
        b.mlp_w1 = detail::need_tensor(tensors, pre + "mlp.w1");
        if (b.mlp_w1.rank() != 2 || b.mlp_w1.dim(0) != d || b.mlp_w1.dim(1) % d != 0)
            throw std::runtime_error("bckp: tensor " + pre + "mlp.w1 has shape " + shape_str(b.mlp_w1.shape));
        const int hidden = b.mlp_w1.dim(1);
        b.mlp_b1 = detail::need_tensor(tensors, pre + "mlp.b1");
        detail::need_shape(b.mlp_b1, {hidden}, pre + "mlp.b1");
        b.mlp_w2 = detail::need_tensor(tensors, pre + "mlp.w2");
        detail::need_shape(b.mlp_w2, {hidden, d}, pre + "mlp.w2");
        b.mlp_b2 = detail::need_tensor(tensors, pre + "mlp.b2");
        detail::need_shape(b.mlp_b2, {d}, pre + "mlp.b2");
    }

    ck.params.cls_w1 = detail::need_tensor(tensors, "cls.w1");
    if (ck.params.cls_w1.rank() != 2 || ck.params.cls_w1.dim(0) != 2 * d)
        throw std::runtime_error("bckp: tensor cls.w1 has shape " + shape_str(ck.params.cls_w1.shape) +
                                 ", expected [" + std::to_string(2 * d) + ", hidden]");
    const int cls_hidden = ck.params.cls_w1.dim(1);
    ck.params.cls_b1 = detail::need_tensor(tensors, "cls.b1");
    detail::need_shape(ck.params.cls_b1, {cls_hidden}, "cls.b1");
    ck.params.cls_w2 = detail::need_tensor(tensors, "cls.w2");
    if (ck.params.cls_w2.rank() != 2 || ck.params.cls_w2.dim(0) != cls_hidden)
        throw std::runtime_error("bckp: tensor cls.w2 has shape " + shape_str(ck.params.cls_w2.shape));
    const int k = ck.params.cls_w2.dim(1);
    ck.params.cls_b2 = detail::need_tensor(tensors, "cls.b2");
    detail::need_shape(ck.params.cls_b2, {k}, "cls.b2");

    if (tensors.count("ref_source")) {
        const Tensor& ref = tensors.at("ref_source");
        if (ref.rank() != 4) throw std::runtime_error("bckp: tensor ref_source must be rank 4 [b, H, W, C]");
        ck.ref_source = ref;
    }
    const bool has_bf = tensors.count("bank.features") > 0;
    const bool has_bp = tensors.count("bank.probs") > 0;
    if (has_bf != has_bp) throw std::runtime_error("bckp: bank.features and bank.probs must appear together");
    if (has_bf) {
        MemoryBank bank;
        bank.features = tensors.at("bank.features");
        bank.probs = tensors.at("bank.probs");
        if (bank.features.rank() != 2 || bank.features.dim(1) != 2 * d)
            throw std::runtime_error("bckp: tensor bank.features has shape " + shape_str(bank.features.shape) +
                                     ", expected [n, " + std::to_string(2 * d) + "]");
        if (bank.probs.rank() != 2 || bank.probs.dim(0) != bank.features.dim(0) || bank.probs.dim(1) != k)
            throw std::runtime_error("bckp: tensor bank.probs has shape " + shape_str(bank.probs.shape));
        bank.initialized.assign(static_cast<size_t>(bank.features.dim(0)), 1);
        ck.bank = std::move(bank);
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path, bool materialize_ref_source = true) {
    return decode_checkpoint(detail::read_file(path, "bckp"), materialize_ref_source);
}

// Model geometry implied by a checkpoint plus the image dims it will run on.
// P comes from the embedding width; head count from `meta`.
inline ModelConfig config_from_checkpoint(const Checkpoint& ck, int image_h, int image_w, int channels) {
    ModelConfig cfg;
    cfg.image_h = image_h;
    cfg.image_w = image_w;
    cfg.channels = channels;
    const int token_dim = ck.params.embed_w.dim(0);
    if (token_dim % channels != 0) throw std::runtime_error("bckp: embedding width incompatible with channel count");
    const int p2 = token_dim / channels;
    const int p = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p2))));
    if (p * p != p2) throw std::runtime_error("bckp: embedding width is not channels * P^2");
    cfg.patch_size = p;
    cfg.d_model = ck.params.embed_w.dim(1);
    cfg.n_heads = ck.n_heads;
    cfg.n_blocks = static_cast<int>(ck.params.blocks.size());
    cfg.mlp_ratio = ck.params.blocks.empty() ? 1 : ck.params.blocks[0].mlp_w1.dim(1) / cfg.d_model;
    cfg.n_classes = ck.params.cls_w2.dim(1);
    cfg.classifier_hidden = ck.params.cls_w1.dim(1);
    cfg.validate();
    return cfg;
}

}  // namespace bcat
