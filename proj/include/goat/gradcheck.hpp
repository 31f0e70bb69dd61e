// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "goat/autodiff.hpp"
#include "goat/eval64.hpp"
#include "goat/param_store.hpp"
#include "goat/tensor.hpp"

namespace goat {

// Central-difference gradient verification. The analytic side runs the
// production float32 graph; the finite-difference oracle evaluates the same
// builder on the double-precision engine (eval64.hpp), so the differences are
// accumulated in 64-bit. Inputs with requires_grad=false are excluded.
//
// Builders must be generic over the graph type: [](auto& g, const auto& in).

inline double gradcheck_rel_error(double analytic, double fd) {
    const double denom = std::max({std::fabs(analytic), std::fabs(fd), 1e-2});
    return std::fabs(analytic - fd) / denom;
}

template <typename Builder>
double check_gradients(Builder&& builder, std::vector<Tensor> inputs, double h = 1e-3) {
    std::vector<std::vector<float>> analytic;
    {
        Graph g;
        std::vector<Var> leaves;
        leaves.reserve(inputs.size());
        for (auto& t : inputs) leaves.push_back(g.leaf(t, t.requires_grad));
        Var loss = builder(g, leaves);
        if (g.value(loss).numel() != 1) throw ArgumentError("check_gradients: loss must be scalar");
        g.backward(loss);
        for (size_t i = 0; i < inputs.size(); ++i)
            analytic.push_back(inputs[i].requires_grad ? g.grad(leaves[i]) : std::vector<float>());
    }

    auto eval = [&](const std::vector<Tensor>& xs) -> double {
        Graph64 g;
        std::vector<Var> leaves;
        leaves.reserve(xs.size());
        for (const auto& t : xs) leaves.push_back(g.leaf(t));
        Var loss = builder(g, leaves);
        return g.scalar(loss);
    };

    double max_rel = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad) continue;
        for (int64_t c = 0; c < inputs[i].numel(); ++c) {
            const float orig = inputs[i].data[c];
            const float xp = orig + static_cast<float>(h);
            const float xm = orig - static_cast<float>(h);
            inputs[i].data[c] = xp;
            const double lp = eval(inputs);
            inputs[i].data[c] = xm;
            const double lm = eval(inputs);
            inputs[i].data[c] = orig;
            const double fd = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
            const double rel = gradcheck_rel_error(static_cast<double>(analytic[i][c]), fd);
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

// Same check over the unfrozen parameters of a store. The builder reads
// parameters through store.leaf(g, name), which works on either engine.
// Frozen parameters carry requires_grad=false and are excluded.
template <typename Builder>
double check_gradients_params(ParamStore& store, Builder&& builder, double h = 1e-3,
                              int stride = 1) {
    std::map<std::string, Tensor> analytic;
    {
        Graph g;
        Var loss = builder(g);
        if (g.value(loss).numel() != 1)
            throw ArgumentError("check_gradients_params: loss must be scalar");
        g.backward(loss);
        analytic = g.named_gradients();
    }

    auto eval = [&]() -> double {
        Graph64 g;
        Var loss = builder(g);
        return g.scalar(loss);
    };

    double max_rel = 0.0;
    for (const std::string& name : store.names()) {
        if (store.frozen(name)) continue;
        auto it = analytic.find(name);
        if (it == analytic.end()) continue;  // not reachable from this loss
        Tensor& value = store.value(name);
        for (int64_t c = 0; c < value.numel(); c += stride) {
            const float orig = value.data[c];
            const float xp = orig + static_cast<float>(h);
            const float xm = orig - static_cast<float>(h);
            value.data[c] = xp;
            const double lp = eval();
            value.data[c] = xm;
            const double lm = eval();
            value.data[c] = orig;
            const double fd = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
            const double rel = gradcheck_rel_error(static_cast<double>(it->second.data[c]), fd);
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

}  // namespace goat
