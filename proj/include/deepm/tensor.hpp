#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "deepm/common.hpp"

namespace deepm::ad {

// Dense row-major tensor of 64-bit floats with up to four axes
// (batch, asset, time, channel). Shape equality is by dims and rank.
struct Shape {
    std::array<int64_t, 4> dim{1, 1, 1, 1};
    int ndim = 0;

    Shape() = default;
    Shape(std::initializer_list<int64_t> dims) {
        DEEPM_REQUIRE(dims.size() <= 4, "tensor rank limited to 4, got ", dims.size());
        ndim = static_cast<int>(dims.size());
        int i = 0;
        for (int64_t d : dims) dim[i++] = d;
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < ndim; ++i) n *= dim[i];
        return n;
    }
    int64_t operator[](int i) const { return dim[i]; }
    bool operator==(const Shape& o) const {
        if (ndim != o.ndim) return false;
        for (int i = 0; i < ndim; ++i)
            if (dim[i] != o.dim[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }
    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < ndim; ++i) s += std::to_string(dim[i]) + (i + 1 < ndim ? "," : "");
        return s + "]";
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), v(static_cast<size_t>(s.numel()), fill) {}

    static Tensor scalar(double x) {
        Tensor t(Shape{1});
        t.v[0] = x;
        return t;
    }
    static Tensor from(Shape s, std::vector<double> data) {
        DEEPM_REQUIRE(static_cast<int64_t>(data.size()) == s.numel(),
                      "data size ", data.size(), " != shape ", s.str());
        Tensor t;
        t.shape = s;
        t.v = std::move(data);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    // index helpers for the common ranks
    double& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return v[static_cast<size_t>(i)]; }
    double& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape.dim[1] + j)]; }
    double at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape.dim[1] + j)]; }
    double& at(int64_t i, int64_t j, int64_t k) {
        return v[static_cast<size_t>((i * shape.dim[1] + j) * shape.dim[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return v[static_cast<size_t>((i * shape.dim[1] + j) * shape.dim[2] + k)];
    }
    double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return v[static_cast<size_t>(((i * shape.dim[1] + j) * shape.dim[2] + k) * shape.dim[3] + l)];
    }
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return v[static_cast<size_t>(((i * shape.dim[1] + j) * shape.dim[2] + k) * shape.dim[3] + l)];
    }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Shape shape;
    std::vector<double> v;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    DEEPM_REQUIRE(a.shape == b.shape, "max_abs_diff shape mismatch ", a.shape.str(), " vs ", b.shape.str());
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.v.size(); ++i)
        if (a.v[i] != b.v[i]) return false;
    return true;
}

}  // namespace deepm::ad
