// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "goat/errors.hpp"
#include "goat/rng.hpp"

namespace goat {

// Dense row-major float32 tensor. Shapes are small and known up front; no
// views, no strides.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }

    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw ArgumentError("Tensor: data length does not match shape");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ArgumentError("Tensor: dimensions must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = rng.normal(0.0f, stddev);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    int rows() const {
        if (ndim() != 2) throw ArgumentError("Tensor: rows() needs a 2-d tensor");
        return shape[0];
    }
    int cols() const {
        if (ndim() != 2) throw ArgumentError("Tensor: cols() needs a 2-d tensor");
        return shape[1];
    }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    float* row(int r) { return data.data() + static_cast<size_t>(r) * shape.back(); }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * shape.back(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace goat
