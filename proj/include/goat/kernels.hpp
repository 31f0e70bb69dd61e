// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

namespace goat {
namespace kernels {

// These kernels are the single source of truth for the scalar operation
// order. The autodiff forward pass and the KV-cache inference engine both
// call them, which is what makes graph outputs and incremental outputs
// bitwise identical.

inline float dot(const float* a, const float* b, int n) {
    float acc = 0.0f;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// y[i] += s * x[i]
inline void accum_scaled(float* y, const float* x, float s, int n) {
    for (int i = 0; i < n; ++i) y[i] += s * x[i];
}

inline void fill(float* y, float v, int n) {
    for (int i = 0; i < n; ++i) y[i] = v;
}

inline void copy(float* y, const float* x, int n) {
    for (int i = 0; i < n; ++i) y[i] = x[i];
}

inline void add(float* y, const float* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += x[i];
}

// In-place numerically stabilized softmax over one row.
inline void softmax_row(float* p, int n) {
    float mx = p[0];
    for (int i = 1; i < n; ++i) mx = p[i] > mx ? p[i] : mx;
    float sum = 0.0f;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
    }
    const float inv = 1.0f / sum;
    for (int i = 0; i < n; ++i) p[i] *= inv;
}

inline float logsumexp_row(const float* p, int n) {
    float mx = p[0];
    for (int i = 1; i < n; ++i) mx = p[i] > mx ? p[i] : mx;
    float sum = 0.0f;
    for (int i = 0; i < n; ++i) sum += std::exp(p[i] - mx);
    return mx + std::log(sum);
}

// y = (x - mean)/sqrt(var + eps) * gain + bias over one row; returns the
// row statistics needed by the backward pass.
struct LayerNormStats {
    float mean;
    float inv_std;
};

inline LayerNormStats layernorm_row(float* y, const float* x, const float* gain,
                                    const float* bias, int n, float eps) {
    float mean = 0.0f;
    for (int i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (int i = 0; i < n; ++i) {
        const float d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<float>(n);
    const float inv_std = 1.0f / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) y[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    return {mean, inv_std};
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

// tanh-approximation GELU
inline float gelu(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    const float t = std::tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

// y[j] = sum_k x[k] * w[k*cols + j], bias added after the accumulation —
// the same scalar order as graph matmul followed by add_bias.
inline void matvec_rowmajor(float* y, const float* x, const float* w, const float* bias,
                            int k, int cols) {
    fill(y, 0.0f, cols);
    for (int i = 0; i < k; ++i) accum_scaled(y, w + static_cast<size_t>(i) * cols, x[i], cols);
    if (bias) add(y, bias, cols);
}

inline float sq_dist(const float* a, const float* b, int n) {
    float acc = 0.0f;
    for (int i = 0; i < n; ++i) {
        const float d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace kernels
}  // namespace goat
