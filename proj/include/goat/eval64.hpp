// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "goat/autodiff.hpp"
#include "goat/errors.hpp"
#include "goat/tensor.hpp"

namespace goat {

// Forward-only double-precision evaluator with the same op surface as Graph.
// This is the finite-difference oracle's reference path: it never feeds
// production outputs, only gradient checks. Generic builders written as
// `[](auto& g, ...)` run unchanged against either engine.
class Graph64 {
public:
    struct T64 {
        std::vector<int> shape;
        std::vector<double> data;

        int rows() const { return shape[0]; }
        int cols() const { return shape[1]; }
        int ndim() const { return static_cast<int>(shape.size()); }
        int64_t numel() const { return static_cast<int64_t>(data.size()); }
        double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
        double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
        const double* row(int r) const { return data.data() + static_cast<size_t>(r) * shape.back(); }
        double* row(int r) { return data.data() + static_cast<size_t>(r) * shape.back(); }
    };

    const T64& value(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }

    Var leaf(const Tensor& t, bool = false, const std::string& = {}) { return from_tensor(t); }
    Var leaf_view(const Tensor* t, bool, const std::string&) { return from_tensor(*t); }

    Var add(Var a, Var b) {
        return zip(a, b, [](double x, double y) { return x + y; });
    }
    Var sub(Var a, Var b) {
        return zip(a, b, [](double x, double y) { return x - y; });
    }
    Var mul(Var a, Var b) {
        return zip(a, b, [](double x, double y) { return x * y; });
    }
    Var scale(Var a, float c) {
        return map(a, [c](double x) { return x * static_cast<double>(c); });
    }
    Var gelu(Var a) {
        return map(a, [](double x) {
            const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            return 0.5 * x * (1.0 + std::tanh(u));
        });
    }

    Var add_bias(Var x, Var bias) {
        T64 out = value(x);
        const T64& b = value(bias);
        const int n = out.cols();
        for (int t = 0; t < out.rows(); ++t)
            for (int j = 0; j < n; ++j) out.at(t, j) += b.data[j];
        return push(std::move(out));
    }

    Var matmul(Var a, Var b) {
        const T64& ta = value(a);
        const T64& tb = value(b);
        const int m = ta.rows(), k = ta.cols(), n = tb.cols();
        T64 out = make_zero({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const double s = ta.at(i, p);
                for (int j = 0; j < n; ++j) out.at(i, j) += s * tb.at(p, j);
            }
        return push(std::move(out));
    }

    Var matmul_nt(Var a, Var b) {
        const T64& ta = value(a);
        const T64& tb = value(b);
        const int m = ta.rows(), k = ta.cols(), n = tb.rows();
        T64 out = make_zero({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int p = 0; p < k; ++p) acc += ta.at(i, p) * tb.at(j, p);
                out.at(i, j) = acc;
            }
        return push(std::move(out));
    }

    Var sum_all(Var a) {
        double s = 0.0;
        for (double v : value(a).data) s += v;
        T64 out;
        out.shape = {1};
        out.data = {s};
        return push(std::move(out));
    }

    Var mean_rows(Var x) {
        const T64& tx = value(x);
        const int T = tx.rows(), d = tx.cols();
        T64 out = make_zero({1, d});
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < d; ++j) out.data[j] += tx.at(t, j);
        for (auto& v : out.data) v /= T;
        return push(std::move(out));
    }

    Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f) {
        const T64& tx = value(x);
        const T64& tg = value(gain);
        const T64& tb = value(bias);
        const int T = tx.rows(), d = tx.cols();
        T64 out = make_zero({T, d});
        for (int t = 0; t < T; ++t) {
            double mean = 0.0;
            for (int i = 0; i < d; ++i) mean += tx.at(t, i);
            mean /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) {
                const double dd = tx.at(t, i) - mean;
                var += dd * dd;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
            for (int i = 0; i < d; ++i)
                out.at(t, i) = (tx.at(t, i) - mean) * inv * tg.data[i] + tb.data[i];
        }
        return push(std::move(out));
    }

    Var embedding(Var table, const std::vector<int>& ids) {
        const T64& tt = value(table);
        const int d = tt.cols();
        T64 out = make_zero({static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j) out.at((int)i, j) = tt.at(ids[i], j);
        return push(std::move(out));
    }

    Var conv1d(Var x, Var w, Var bias, int stride, int pad_l, int pad_r) {
        const T64& tx = value(x);
        const T64& tw = value(w);
        const T64& tb = value(bias);
        const int T = tx.rows(), cin = tx.cols();
        const int K = tw.shape[0], cout = tw.shape[2];
        const int t_out = (T + pad_l + pad_r - K) / stride + 1;
        T64 out = make_zero({t_out, cout});
        for (int t = 0; t < t_out; ++t) {
            for (int co = 0; co < cout; ++co) out.at(t, co) = tb.data[co];
            for (int k = 0; k < K; ++k) {
                const int ti = t * stride + k - pad_l;
                if (ti < 0 || ti >= T) continue;
                for (int ci = 0; ci < cin; ++ci) {
                    const double s = tx.at(ti, ci);
                    const double* wr = tw.data.data() + (static_cast<size_t>(k) * cin + ci) * cout;
                    for (int co = 0; co < cout; ++co) out.at(t, co) += s * wr[co];
                }
            }
        }
        return push(std::move(out));
    }

    Var concat_rows(const std::vector<Var>& parts) {
        const int d = value(parts[0]).cols();
        int total = 0;
        for (Var p : parts) total += value(p).rows();
        T64 out = make_zero({total, d});
        int r = 0;
        for (Var p : parts) {
            const T64& tp = value(p);
            for (int i = 0; i < tp.rows(); ++i)
                for (int j = 0; j < d; ++j) out.at(r + i, j) = tp.at(i, j);
            r += tp.rows();
        }
        return push(std::move(out));
    }

    Var concat_cols(Var a, Var b) {
        const T64& ta = value(a);
        const T64& tb = value(b);
        const int T = ta.rows(), da = ta.cols(), db = tb.cols();
        T64 out = make_zero({T, da + db});
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < da; ++j) out.at(t, j) = ta.at(t, j);
            for (int j = 0; j < db; ++j) out.at(t, da + j) = tb.at(t, j);
        }
        return push(std::move(out));
    }

    Var slice_cols(Var x, int c0, int c1) {
        const T64& tx = value(x);
        const int T = tx.rows(), w = c1 - c0;
        T64 out = make_zero({T, w});
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < w; ++j) out.at(t, j) = tx.at(t, c0 + j);
        return push(std::move(out));
    }

    Var gather_rows(Var x, const std::vector<int>& rows) {
        const T64& tx = value(x);
        const int d = tx.cols();
        T64 out = make_zero({static_cast<int>(rows.size()), d});
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < d; ++j) out.at((int)i, j) = tx.at(rows[i], j);
        return push(std::move(out));
    }

    Var causal_mask(Var x) {
        T64 out = value(x);
        const int T = out.rows();
        for (int i = 0; i < T; ++i)
            for (int j = i + 1; j < T; ++j) out.at(i, j) += -1e9;
        return push(std::move(out));
    }

    Var softmax(Var x, int axis) {
        const T64& tx = value(x);
        const int nd = tx.ndim();
        if (axis < 0) axis += nd;
        const int len = tx.shape[axis];
        int64_t inner = 1;
        for (int i = axis + 1; i < nd; ++i) inner *= tx.shape[i];
        const int64_t outer = tx.numel() / (static_cast<int64_t>(len) * inner);
        T64 out = tx;
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                double mx = out.data[base];
                for (int i = 1; i < len; ++i) mx = std::max(mx, out.data[base + i * inner]);
                double sum = 0.0;
                for (int i = 0; i < len; ++i) {
                    out.data[base + i * inner] = std::exp(out.data[base + i * inner] - mx);
                    sum += out.data[base + i * inner];
                }
                for (int i = 0; i < len; ++i) out.data[base + i * inner] /= sum;
            }
        }
        return push(std::move(out));
    }

    Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index = -1,
                      Graph::Reduction red = Graph::Reduction::Mean) {
        const T64& tl = value(logits);
        const int T = tl.rows(), V = tl.cols();
        double loss = 0.0;
        int kept = 0;
        for (int t = 0; t < T; ++t) {
            if (targets[t] == ignore_index) continue;
            double mx = tl.at(t, 0);
            for (int j = 1; j < V; ++j) mx = std::max(mx, tl.at(t, j));
            double sum = 0.0;
            for (int j = 0; j < V; ++j) sum += std::exp(tl.at(t, j) - mx);
            loss += mx + std::log(sum) - tl.at(t, targets[t]);
            ++kept;
        }
        if (kept > 0 && red == Graph::Reduction::Mean) loss /= kept;
        if (kept == 0) loss = 0.0;
        T64 out;
        out.shape = {1};
        out.data = {loss};
        return push(std::move(out));
    }

    double scalar(Var v) const { return value(v).data[0]; }

private:
    Var from_tensor(const Tensor& t) {
        T64 out;
        out.shape = t.shape;
        out.data.assign(t.data.begin(), t.data.end());
        return push(std::move(out));
    }

    T64 make_zero(std::vector<int> shape) {
        T64 out;
        int64_t n = 1;
        for (int d : shape) n *= d;
        out.shape = std::move(shape);
        out.data.assign(static_cast<size_t>(n), 0.0);
        return out;
    }

    template <typename F>
    Var map(Var a, F f) {
        T64 out = value(a);
        for (auto& v : out.data) v = f(v);
        return push(std::move(out));
    }

    template <typename F>
    Var zip(Var a, Var b, F f) {
        T64 out = value(a);
        const T64& tb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(out.data[i], tb.data[i]);
        return push(std::move(out));
    }

    Var push(T64 t) {
        nodes_.push_back(std::move(t));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<T64> nodes_;
};

}  // namespace goat
