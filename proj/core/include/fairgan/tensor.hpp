#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fairgan/errors.hpp"

namespace fairgan {

// Dense n-dimensional array, row-major. Values are held in double precision
// (the formats that pin 32-bit payloads round on save); `grad` is an optional
// same-shape buffer populated by the backward pass.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;
    std::vector<double> grad;  // empty when absent

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> values)
        : shape(std::move(s)), v(std::move(values)) {
        if (v.size() != numel_of(shape)) {
            throw ConfigError("tensor values length " + std::to_string(v.size()) +
                              " does not match shape (" + shape_str() + ")");
        }
    }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ConfigError("tensor extents must be positive");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return v.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    // Matrix accessors; valid for rank-2 tensors.
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    void ensure_grad() {
        if (grad.size() != v.size()) grad.assign(v.size(), 0.0);
    }

    void clear_grad() { grad.clear(); }

    // Rounds every value through IEEE binary32. Datasets and parameters live
    // in the f32 lattice so the f32 file formats round-trip bit-exactly.
    void round_f32() {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }

    std::string shape_str() const {
        std::string s;
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s;
    }
};

inline Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

inline Tensor full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    for (double& x : t.v) x = value;
    return t;
}

// Square identity matrix.
inline Tensor eye(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

}  // namespace fairgan
