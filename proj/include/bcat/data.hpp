#pragma once

// Synthetic two-domain dataset ("ShiftedShapes"), the BCDS on-disk format,
// and seeded batching.
//
// ShiftedShapes: 16x16x1 images, four classes
//   0: horizontal bar, rows 6..9
//   1: vertical bar, cols 6..9
//   2: main diagonal band, |row - col| <= 1
//   3: centered 8x8 square, rows/cols 4..11
// Foreground/background intensities, additive gaussian noise and a uniform
// integer translation (toroidal wrap) come from ShiftParams. Labels cycle
// i % 4, so classes are balanced. Sample i draws from its own generator
// seeded derive_seed(seed, kStreamDataGen, i); draw order is row shift,
// col shift, then one noise value per pixel in row-major order. Pixels are
// clamped to [0, 1] and quantized through f32 (the storage precision), so
// in-memory and loaded datasets are value-identical.
//
// BCDS format (all integers little-endian):
//   magic "BCDS" | u32 version=1 | u32 n | u32 H | u32 W | u32 C |
//   u8 has_labels | n*H*W*C f32 pixels | [n u32 labels]

#include <cstring>
#include <fstream>

#include "bcat/rng.hpp"
#include "bcat/tensor.hpp"

namespace bcat {

enum class DomainTag { source, target };

struct Dataset {
    Tensor images;            // [n, H, W, C], values in [0, 1]
    std::vector<int> labels;  // empty when unlabeled
    DomainTag tag = DomainTag::source;

    int size() const { return images.dim(0); }
    bool has_labels() const { return !labels.empty(); }
};

struct ShiftParams {
    double fg = 0.9;
    double bg = 0.1;
    double sigma = 0.05;
    int max_translation = 0;

    void validate() const {
        if (!(fg >= 0.0 && fg <= 1.0 && bg >= 0.0 && bg <= 1.0))
            throw std::invalid_argument("shift: intensities must be in [0, 1]");
        if (!(sigma >= 0.0)) throw std::invalid_argument("shift: sigma must be >= 0");
        if (max_translation < 0) throw std::invalid_argument("shift: max translation must be >= 0");
    }
};

inline ShiftParams source_preset() { return {0.9, 0.1, 0.05, 0}; }
inline ShiftParams target_preset() { return {0.2, 0.8, 0.10, 2}; }

constexpr int kShapeImage = 16;
constexpr int kShapeClasses = 4;

namespace detail {
inline bool shape_fg(int cls, int r, int c) {
    switch (cls) {
        case 0: return r >= 6 && r <= 9;
        case 1: return c >= 6 && c <= 9;
        case 2: return std::abs(r - c) <= 1;
        case 3: return r >= 4 && r <= 11 && c >= 4 && c <= 11;
        default: return false;
    }
}

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
}  // namespace detail

inline Dataset gen_shifted_shapes(int n, const ShiftParams& shift, uint64_t seed, DomainTag tag = DomainTag::source) {
    if (n < 1) throw std::invalid_argument("gen_shifted_shapes: n must be >= 1");
    shift.validate();
    const int hw = kShapeImage;
    Dataset d;
    d.tag = tag;
    d.images = Tensor({n, hw, hw, 1});
    d.labels.resize(static_cast<size_t>(n));
    const int span = 2 * shift.max_translation + 1;
    for (int i = 0; i < n; ++i) {
        const int cls = i % kShapeClasses;
        d.labels[static_cast<size_t>(i)] = cls;
        Rng rng(derive_seed(seed, kStreamDataGen, static_cast<uint64_t>(i)));
        const int dr = shift.max_translation == 0 ? 0 : static_cast<int>(rng.next_below(static_cast<uint64_t>(span))) - shift.max_translation;
        const int dc = shift.max_translation == 0 ? 0 : static_cast<int>(rng.next_below(static_cast<uint64_t>(span))) - shift.max_translation;
        double* img = d.images.data.data() + static_cast<int64_t>(i) * hw * hw;
        for (int r = 0; r < hw; ++r)
            for (int c = 0; c < hw; ++c) {
                const int br = ((r - dr) % hw + hw) % hw;
                const int bc = ((c - dc) % hw + hw) % hw;
                double v = detail::shape_fg(cls, br, bc) ? shift.fg : shift.bg;
                v += shift.sigma * rng.next_gaussian();
                v = std::min(1.0, std::max(0.0, v));
                img[r * hw + c] = detail::quantize_f32(v);
            }
    }
    return d;
}

// --------------------------------------------------------------------- BCDS

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class ByteReader {
  public:
    ByteReader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(buf_[pos_ + static_cast<size_t>(i)]);
        pos_ += 4;
        return v;
    }

    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf_[pos_++]);
    }

    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double f64() {
        need(8);
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(buf_[pos_ + static_cast<size_t>(i)]);
        pos_ += 8;
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }

    std::string bytes(size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == buf_.size(); }

  private:
    void need(size_t n) {
        if (pos_ + n > buf_.size()) throw std::runtime_error(what_ + ": truncated file");
    }

    const std::string& buf_;
    std::string what_;
    size_t pos_ = 0;
};

inline std::string read_file(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& bytes, const char* what) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(std::string(what) + ": cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(std::string(what) + ": write failed for " + path);
}

}  // namespace detail

inline std::string encode_dataset(const Dataset& d) {
    const int n = d.images.dim(0), h = d.images.dim(1), w = d.images.dim(2), c = d.images.dim(3);
    if (d.has_labels() && static_cast<int>(d.labels.size()) != n)
        throw std::invalid_argument("bcds: label count " + std::to_string(d.labels.size()) + " does not match n=" +
                                    std::to_string(n));
    std::string out;
    out.reserve(25 + d.images.data.size() * 4 + d.labels.size() * 4);
    out += "BCDS";
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<uint32_t>(n));
    detail::put_u32(out, static_cast<uint32_t>(h));
    detail::put_u32(out, static_cast<uint32_t>(w));
    detail::put_u32(out, static_cast<uint32_t>(c));
    out.push_back(d.has_labels() ? 1 : 0);
    for (double v : d.images.data) detail::put_f32(out, static_cast<float>(v));
    if (d.has_labels())
        for (int y : d.labels) detail::put_u32(out, static_cast<uint32_t>(y));
    return out;
}

inline void save_dataset(const Dataset& d, const std::string& path) {
    detail::write_file(path, encode_dataset(d), "bcds");
}

inline Dataset decode_dataset(const std::string& bytes, DomainTag tag = DomainTag::source) {
    detail::ByteReader r(bytes, "bcds");
    if (r.bytes(4) != "BCDS") throw std::runtime_error("bcds: bad magic");
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("bcds: unsupported version " + std::to_string(version));
    const int n = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    const int c = static_cast<int>(r.u32());
    const bool has_labels = r.u8() != 0;
    Dataset d;
    d.tag = tag;
    d.images = Tensor({n, h, w, c});
    for (auto& v : d.images.data) v = static_cast<double>(r.f32());
    if (has_labels) {
        d.labels.resize(static_cast<size_t>(n));
        for (auto& y : d.labels) y = static_cast<int>(r.u32());
    }
    if (!r.at_end()) throw std::runtime_error("bcds: trailing bytes");
    return d;
}

inline Dataset load_dataset(const std::string& path, DomainTag tag = DomainTag::source) {
    return decode_dataset(detail::read_file(path, "bcds"), tag);
}

// ------------------------------------------------------------------ batching

// Seeded Fisher-Yates over the index range, cut into full batches; the final
// short batch is dropped.
inline std::vector<std::vector<int>> make_batches(const Dataset& d, int batch_size, uint64_t epoch_seed) {
    if (batch_size < 2) throw std::invalid_argument("batches: batch size must be >= 2");
    if (batch_size > d.size())
        throw std::invalid_argument("batches: batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                                    std::to_string(d.size()));
    std::vector<int> order(static_cast<size_t>(d.size()));
    for (int i = 0; i < d.size(); ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(epoch_seed);
    fisher_yates(order, rng);
    std::vector<std::vector<int>> batches;
    const int nb = d.size() / batch_size;
    batches.reserve(static_cast<size_t>(nb));
    for (int b = 0; b < nb; ++b)
        batches.emplace_back(order.begin() + static_cast<int64_t>(b) * batch_size,
                             order.begin() + static_cast<int64_t>(b + 1) * batch_size);
    return batches;
}

// Rows of `images` selected by index; labels gathered alongside when present.
inline Tensor gather_images(const Tensor& images, const std::vector<int>& idx) {
    const int64_t row = images.numel() / images.dim(0);
    std::vector<int> oshape = images.shape;
    oshape[0] = static_cast<int>(idx.size());
    Tensor out(oshape);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(images.data.data() + static_cast<int64_t>(idx[i]) * row, row,
                    out.data.data() + static_cast<int64_t>(i) * row);
    return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<int>& idx) {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<size_t>(idx[i])];
    return out;
}

}  // namespace bcat
