#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vfda {

/// Dense row-major tensor of 64-bit floats, rank 1..5.
///
/// Feature maps use the fixed axis order (batch, channel, height, width,
/// slice). There is no view aliasing; every op produces a fresh tensor.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(checked_numel(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != checked_numel(shape)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

    static std::string shape_str(const std::vector<int64_t>& s) {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << ']';
        return os.str();
    }

    static int64_t checked_numel(const std::vector<int64_t>& s) {
        if (s.empty() || s.size() > 5) {
            throw std::invalid_argument("tensor rank must be 1..5, got " + shape_str(s));
        }
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!same_shape(a, b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    Tensor::shape_str(a.shape) + " vs " + Tensor::shape_str(b.shape));
    }
}

/// Integer label volume paired with a feature-map tensor.  Values are class
/// ids in [0, K); the shape carried here is spatial only (labels have no
/// channel axis).
struct LabelArray {
    std::vector<int64_t> shape;  // e.g. {B, H, W, S} or {D, D, D}
    std::vector<uint8_t> data;

    LabelArray() = default;
    explicit LabelArray(std::vector<int64_t> s)
        : shape(std::move(s)), data(static_cast<size_t>(Tensor::checked_numel(shape)), 0) {}
    LabelArray(std::vector<int64_t> s, std::vector<uint8_t> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != Tensor::checked_numel(shape)) {
            throw std::invalid_argument("label data length does not match shape " + Tensor::shape_str(shape));
        }
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

}  // namespace vfda
