#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcat {

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 1) throw std::invalid_argument("tensor: dimension must be >= 1, got shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

// Dense row-major tensor of 64-bit floats. A scalar is shape {1}.
// `grad` is empty unless a gradient has been attached; when present it has
// the same length as `data`. All stored values are finite by construction:
// leaves and kernel outputs are checked.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0) {}

    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int last_dim() const { return shape.back(); }

    double& at(std::initializer_list<int> idx) { return data[static_cast<size_t>(offset_of(idx))]; }
    double at(std::initializer_list<int> idx) const { return data[static_cast<size_t>(offset_of(idx))]; }

    int64_t offset_of(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != rank())
            throw std::out_of_range("tensor: index rank mismatch for shape " + shape_str(shape));
        int64_t off = 0;
        int i = 0;
        for (int v : idx) {
            if (v < 0 || v >= shape[static_cast<size_t>(i)])
                throw std::out_of_range("tensor: index out of range for shape " + shape_str(shape));
            off = off * shape[static_cast<size_t>(i)] + v;
            ++i;
        }
        return off;
    }
};

inline std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<int64_t> st(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return st;
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void check_finite(const Tensor& t, const char* where) {
    if (!all_finite(t.data)) throw std::runtime_error(std::string(where) + ": non-finite value");
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace bcat
