// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "goat/errors.hpp"
#include "goat/kernels.hpp"
#include "goat/tensor.hpp"

namespace goat {

// Reverse-mode autodiff over a flat tape. Nodes are appended in execution
// order, so the tape order is already topological; backward() is a single
// reverse sweep with gradients accumulated in recorded order.
class Graph;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {

struct Node {
    Tensor owned;                 // value for computed nodes and owned leaves
    const Tensor* view = nullptr; // set for parameter leaves bound to a store
    std::vector<float> grad;      // allocated iff requires_grad
    bool requires_grad = false;
    std::string name;             // nonempty for named leaves
    std::function<void(Graph&)> backward_fn;

    const Tensor& val() const { return view ? *view : owned; }
};

}  // namespace detail

class Graph {
public:
    Graph() { nodes_.reserve(256); }

    const Tensor& value(Var v) const { return node(v).val(); }
    const std::vector<int>& shape(Var v) const { return node(v).val().shape; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    std::vector<float>& grad(Var v) {
        auto& n = node(v);
        if (!n.requires_grad) throw ArgumentError("grad: node does not require gradients");
        return n.grad;
    }

    // ---- leaves ----

    Var leaf(Tensor t, bool requires_grad = false, std::string name = {}) {
        detail::Node n;
        n.owned = std::move(t);
        n.requires_grad = requires_grad;
        n.name = std::move(name);
        return push(std::move(n));
    }

    // Leaf referencing externally owned storage (parameters). The tensor must
    // outlive the graph and stay unmodified until backward() completes.
    // Named leaves are memoized so every use of a parameter inside one graph
    // shares a single node and gradients from all uses accumulate there.
    Var leaf_view(const Tensor* t, bool requires_grad, std::string name) {
        if (!name.empty()) {
            auto it = named_leaves_.find(name);
            if (it != named_leaves_.end()) return it->second;
        }
        detail::Node n;
        n.view = t;
        n.requires_grad = requires_grad;
        n.name = name;
        Var v = push(std::move(n));
        if (!name.empty()) named_leaves_.emplace(std::move(name), v);
        return v;
    }

    // ---- elementwise / linear ----

    Var add(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.same_shape(tb), "add: shape mismatch");
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] + tb.data[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(a)) kernels::add(g.node(a).grad.data(), dy.data(), (int)dy.size());
            if (g.requires_grad(b)) kernels::add(g.node(b).grad.data(), dy.data(), (int)dy.size());
        });
    }

    Var sub(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.same_shape(tb), "sub: shape mismatch");
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] - tb.data[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(a)) kernels::add(g.node(a).grad.data(), dy.data(), (int)dy.size());
            if (g.requires_grad(b))
                kernels::accum_scaled(g.node(b).grad.data(), dy.data(), -1.0f, (int)dy.size());
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.same_shape(tb), "mul: shape mismatch");
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            const auto& va = g.value(a).data;
            const auto& vb = g.value(b).data;
            if (g.requires_grad(a)) {
                auto& da = g.node(a).grad;
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * vb[i];
            }
            if (g.requires_grad(b)) {
                auto& db = g.node(b).grad;
                for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * va[i];
            }
        });
    }

    Var scale(Var a, float c) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] * c;
        return make(std::move(out), {a}, [a, c](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(a))
                kernels::accum_scaled(g.node(a).grad.data(), dy.data(), c, (int)dy.size());
        });
    }

    // x: [T x n], bias: [n]
    Var add_bias(Var x, Var bias) {
        const Tensor& tx = value(x);
        const Tensor& tb = value(bias);
        require(tx.ndim() == 2 && tb.ndim() == 1 && tb.shape[0] == tx.cols(),
                "add_bias: x must be [T x n], bias [n]");
        Tensor out(tx.shape);
        const int T = tx.rows(), n = tx.cols();
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < n; ++j) out.at(t, j) = tx.at(t, j) + tb.data[j];
        return make(std::move(out), {x, bias}, [x, bias, T, n](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(x)) kernels::add(g.node(x).grad.data(), dy.data(), T * n);
            if (g.requires_grad(bias)) {
                auto& db = g.node(bias).grad;
                for (int t = 0; t < T; ++t)
                    kernels::add(db.data(), dy.data() + static_cast<size_t>(t) * n, n);
            }
        });
    }

    // A: [m x k], B: [k x n]
    Var matmul(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.ndim() == 2 && tb.ndim() == 2 && ta.cols() == tb.rows(),
                "matmul: shapes incompatible " + shape_str(ta.shape) + " * " + shape_str(tb.shape));
        const int m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor out({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p)
                kernels::accum_scaled(out.row(i), tb.row(p), ta.at(i, p), n);
        return make(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            const Tensor& va = g.value(a);
            const Tensor& vb = g.value(b);
            if (g.requires_grad(a)) {
                auto& da = g.node(a).grad;
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p)
                        da[static_cast<size_t>(i) * k + p] +=
                            kernels::dot(dy.data() + static_cast<size_t>(i) * n, vb.row(p), n);
            }
            if (g.requires_grad(b)) {
                auto& db = g.node(b).grad;
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p)
                        kernels::accum_scaled(db.data() + static_cast<size_t>(p) * n,
                                              dy.data() + static_cast<size_t>(i) * n, va.at(i, p),
                                              n);
            }
        });
    }

    // A: [m x k], B: [n x k]; returns A * B^T as [m x n]
    Var matmul_nt(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.ndim() == 2 && tb.ndim() == 2 && ta.cols() == tb.cols(),
                "matmul_nt: shapes incompatible");
        const int m = ta.rows(), k = ta.cols(), n = tb.rows();
        Tensor out({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at(i, j) = kernels::dot(ta.row(i), tb.row(j), k);
        return make(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            const Tensor& va = g.value(a);
            const Tensor& vb = g.value(b);
            if (g.requires_grad(a)) {
                auto& da = g.node(a).grad;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        kernels::accum_scaled(da.data() + static_cast<size_t>(i) * k, vb.row(j),
                                              dy[static_cast<size_t>(i) * n + j], k);
            }
            if (g.requires_grad(b)) {
                auto& db = g.node(b).grad;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        kernels::accum_scaled(db.data() + static_cast<size_t>(j) * k, va.row(i),
                                              dy[static_cast<size_t>(i) * n + j], k);
            }
        });
    }

    Var sum_all(Var a) {
        const Tensor& ta = value(a);
        float s = 0.0f;
        for (float v : ta.data) s += v;
        Tensor out({1}, {s});
        return make(std::move(out), {a}, [a](Graph& g, Var y) {
            const float dy = g.node(y).grad[0];
            if (g.requires_grad(a)) {
                auto& da = g.node(a).grad;
                for (auto& v : da) v += dy;
            }
        });
    }

    // column means: [T x d] -> [1 x d]
    Var mean_rows(Var x) {
        const Tensor& tx = value(x);
        require(tx.ndim() == 2, "mean_rows: needs 2-d input");
        const int T = tx.rows(), d = tx.cols();
        Tensor out({1, d});
        for (int t = 0; t < T; ++t) kernels::add(out.data.data(), tx.row(t), d);
        const float inv = 1.0f / static_cast<float>(T);
        for (auto& v : out.data) v *= inv;
        return make(std::move(out), {x}, [x, T, d, inv](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(x)) {
                auto& dx = g.node(x).grad;
                for (int t = 0; t < T; ++t)
                    kernels::accum_scaled(dx.data() + static_cast<size_t>(t) * d, dy.data(), inv, d);
            }
        });
    }

    Var gelu(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape);
        for (int64_t i = 0; i < tx.numel(); ++i) out.data[i] = kernels::gelu(tx.data[i]);
        return make(std::move(out), {x}, [x](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(x)) {
                const auto& vx = g.value(x).data;
                auto& dx = g.node(x).grad;
                for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * kernels::gelu_grad(vx[i]);
            }
        });
    }

    // x: [T x d], gain/bias: [d]
    Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f) {
        const Tensor& tx = value(x);
        const Tensor& tg = value(gain);
        const Tensor& tb = value(bias);
        require(tx.ndim() == 2 && tg.ndim() == 1 && tb.ndim() == 1 && tg.shape[0] == tx.cols() &&
                    tb.shape[0] == tx.cols(),
                "layer_norm: x [T x d], gain/bias [d]");
        const int T = tx.rows(), d = tx.cols();
        Tensor out(tx.shape);
        auto stats = std::make_shared<std::vector<kernels::LayerNormStats>>();
        stats->resize(T);
        for (int t = 0; t < T; ++t)
            (*stats)[t] = kernels::layernorm_row(out.row(t), tx.row(t), tg.data.data(),
                                                 tb.data.data(), d, eps);
        return make(std::move(out), {x, gain, bias},
                    [x, gain, bias, T, d, stats](Graph& g, Var y) {
                        const auto& dy = g.node(y).grad;
                        const Tensor& vx = g.value(x);
                        const Tensor& vg = g.value(gain);
                        const bool need_x = g.requires_grad(x);
                        const bool need_g = g.requires_grad(gain);
                        const bool need_b = g.requires_grad(bias);
                        for (int t = 0; t < T; ++t) {
                            const float* xr = vx.row(t);
                            const float* dyr = dy.data() + static_cast<size_t>(t) * d;
                            const float mean = (*stats)[t].mean;
                            const float inv = (*stats)[t].inv_std;
                            if (need_g || need_b) {
                                auto* dg = need_g ? g.node(gain).grad.data() : nullptr;
                                auto* db = need_b ? g.node(bias).grad.data() : nullptr;
                                for (int i = 0; i < d; ++i) {
                                    const float xh = (xr[i] - mean) * inv;
                                    if (dg) dg[i] += dyr[i] * xh;
                                    if (db) db[i] += dyr[i];
                                }
                            }
                            if (need_x) {
                                float sa = 0.0f, sb = 0.0f;
                                for (int i = 0; i < d; ++i) {
                                    const float gi = dyr[i] * vg.data[i];
                                    const float xh = (xr[i] - mean) * inv;
                                    sa += gi;
                                    sb += gi * xh;
                                }
                                sa /= static_cast<float>(d);
                                sb /= static_cast<float>(d);
                                auto* dx = g.node(x).grad.data() + static_cast<size_t>(t) * d;
                                for (int i = 0; i < d; ++i) {
                                    const float gi = dyr[i] * vg.data[i];
                                    const float xh = (xr[i] - mean) * inv;
                                    dx[i] += inv * (gi - sa - xh * sb);
                                }
                            }
                        }
                    });
    }

    // table: [V x d]; out row i = table row ids[i]
    Var embedding(Var table, const std::vector<int>& ids) {
        const Tensor& tt = value(table);
        require(tt.ndim() == 2, "embedding: table must be [V x d]");
        const int V = tt.rows(), d = tt.cols();
        for (int id : ids)
            require(id >= 0 && id < V, "embedding: id out of range");
        require(!ids.empty(), "embedding: empty id list");
        Tensor out({static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) kernels::copy(out.row((int)i), tt.row(ids[i]), d);
        auto idx = std::make_shared<std::vector<int>>(ids);
        return make(std::move(out), {table}, [table, idx, d](Graph& g, Var y) {
            if (!g.requires_grad(table)) return;
            const auto& dy = g.node(y).grad;
            auto& dt = g.node(table).grad;
            for (size_t i = 0; i < idx->size(); ++i)
                kernels::add(dt.data() + static_cast<size_t>((*idx)[i]) * d,
                             dy.data() + i * d, d);
        });
    }

    // x: [T x Cin], w: [K x Cin x Cout], bias: [Cout]
    // out length = floor((T + pad_l + pad_r - K)/stride) + 1, zero padding.
    Var conv1d(Var x, Var w, Var bias, int stride, int pad_l, int pad_r) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        const Tensor& tb = value(bias);
        require(tx.ndim() == 2 && tw.ndim() == 3, "conv1d: x [T x Cin], w [K x Cin x Cout]");
        const int T = tx.rows(), cin = tx.cols();
        const int K = tw.shape[0], cout = tw.shape[2];
        require(tw.shape[1] == cin, "conv1d: channel mismatch");
        require(tb.ndim() == 1 && tb.shape[0] == cout, "conv1d: bias [Cout]");
        require(stride >= 1, "conv1d: stride must be >= 1");
        const int t_out = (T + pad_l + pad_r - K) / stride + 1;
        require(t_out >= 1, "conv1d: output length < 1");
        Tensor out({t_out, cout});
        auto wrow = [&](const Tensor& wt, int k, int ci) {
            return wt.data.data() + (static_cast<size_t>(k) * cin + ci) * cout;
        };
        for (int t = 0; t < t_out; ++t) {
            kernels::copy(out.row(t), tb.data.data(), cout);
            for (int k = 0; k < K; ++k) {
                const int ti = t * stride + k - pad_l;
                if (ti < 0 || ti >= T) continue;
                for (int ci = 0; ci < cin; ++ci)
                    kernels::accum_scaled(out.row(t), wrow(tw, k, ci), tx.at(ti, ci), cout);
            }
        }
        return make(std::move(out), {x, w, bias},
                    [x, w, bias, stride, pad_l, T, cin, K, cout, t_out](Graph& g, Var y) {
                        const auto& dy = g.node(y).grad;
                        const Tensor& vx = g.value(x);
                        const Tensor& vw = g.value(w);
                        const bool nx = g.requires_grad(x);
                        const bool nw = g.requires_grad(w);
                        const bool nb = g.requires_grad(bias);
                        auto woff = [&](int k, int ci) {
                            return (static_cast<size_t>(k) * cin + ci) * cout;
                        };
                        for (int t = 0; t < t_out; ++t) {
                            const float* dyr = dy.data() + static_cast<size_t>(t) * cout;
                            if (nb) kernels::add(g.node(bias).grad.data(), dyr, cout);
                            for (int k = 0; k < K; ++k) {
                                const int ti = t * stride + k - pad_l;
                                if (ti < 0 || ti >= T) continue;
                                for (int ci = 0; ci < cin; ++ci) {
                                    if (nx)
                                        g.node(x).grad[static_cast<size_t>(ti) * cin + ci] +=
                                            kernels::dot(dyr, vw.data.data() + woff(k, ci), cout);
                                    if (nw)
                                        kernels::accum_scaled(g.node(w).grad.data() + woff(k, ci),
                                                              dyr, vx.at(ti, ci), cout);
                                }
                            }
                        }
                    });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows: empty list");
        const int d = value(parts[0]).cols();
        int total = 0;
        for (Var p : parts) {
            require(value(p).ndim() == 2 && value(p).cols() == d, "concat_rows: column mismatch");
            total += value(p).rows();
        }
        Tensor out({total, d});
        int r = 0;
        for (Var p : parts) {
            const Tensor& tp = value(p);
            kernels::copy(out.row(r), tp.data.data(), tp.rows() * d);
            r += tp.rows();
        }
        auto ps = std::make_shared<std::vector<Var>>(parts);
        return make(std::move(out), parts, [ps, d](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            size_t off = 0;
            for (Var p : *ps) {
                const int rows = g.value(p).rows();
                if (g.requires_grad(p))
                    kernels::add(g.node(p).grad.data(), dy.data() + off, rows * d);
                off += static_cast<size_t>(rows) * d;
            }
        });
    }

    // concatenation along the feature axis
    Var concat_cols(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.ndim() == 2 && tb.ndim() == 2 && ta.rows() == tb.rows(),
                "concat_cols: row mismatch");
        const int T = ta.rows(), da = ta.cols(), db_ = tb.cols();
        Tensor out({T, da + db_});
        for (int t = 0; t < T; ++t) {
            kernels::copy(out.row(t), ta.row(t), da);
            kernels::copy(out.row(t) + da, tb.row(t), db_);
        }
        return make(std::move(out), {a, b}, [a, b, T, da, db_](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            const int dt = da + db_;
            for (int t = 0; t < T; ++t) {
                const float* dyr = dy.data() + static_cast<size_t>(t) * dt;
                if (g.requires_grad(a))
                    kernels::add(g.node(a).grad.data() + static_cast<size_t>(t) * da, dyr, da);
                if (g.requires_grad(b))
                    kernels::add(g.node(b).grad.data() + static_cast<size_t>(t) * db_, dyr + da,
                                 db_);
            }
        });
    }

    Var slice_cols(Var x, int c0, int c1) {
        const Tensor& tx = value(x);
        require(tx.ndim() == 2 && c0 >= 0 && c1 <= tx.cols() && c0 < c1,
                "slice_cols: bad column range");
        const int T = tx.rows(), d = tx.cols(), w = c1 - c0;
        Tensor out({T, w});
        for (int t = 0; t < T; ++t) kernels::copy(out.row(t), tx.row(t) + c0, w);
        return make(std::move(out), {x}, [x, c0, T, d, w](Graph& g, Var y) {
            if (!g.requires_grad(x)) return;
            const auto& dy = g.node(y).grad;
            auto& dx = g.node(x).grad;
            for (int t = 0; t < T; ++t)
                kernels::add(dx.data() + static_cast<size_t>(t) * d + c0,
                             dy.data() + static_cast<size_t>(t) * w, w);
        });
    }

    Var gather_rows(Var x, const std::vector<int>& rows) {
        const Tensor& tx = value(x);
        require(tx.ndim() == 2 && !rows.empty(), "gather_rows: needs 2-d input and rows");
        const int T = tx.rows(), d = tx.cols();
        for (int r : rows)
            require(r >= 0 && r < T, "gather_rows: row index out of range");
        Tensor out({static_cast<int>(rows.size()), d});
        for (size_t i = 0; i < rows.size(); ++i) kernels::copy(out.row((int)i), tx.row(rows[i]), d);
        auto idx = std::make_shared<std::vector<int>>(rows);
        return make(std::move(out), {x}, [x, idx, d](Graph& g, Var y) {
            if (!g.requires_grad(x)) return;
            const auto& dy = g.node(y).grad;
            auto& dx = g.node(x).grad;
            for (size_t i = 0; i < idx->size(); ++i)
                kernels::add(dx.data() + static_cast<size_t>((*idx)[i]) * d, dy.data() + i * d, d);
        });
    }

    // additive causal mask: x[i][j] += -1e9 for j > i; x must be [T x T]
    Var causal_mask(Var x) {
        const Tensor& tx = value(x);
        require(tx.ndim() == 2 && tx.rows() == tx.cols(), "causal_mask: needs square [T x T]");
        const int T = tx.rows();
        Tensor out = tx;
        for (int i = 0; i < T; ++i)
            for (int j = i + 1; j < T; ++j) out.at(i, j) += -1e9f;
        return make(std::move(out), {x}, [x](Graph& g, Var y) {
            const auto& dy = g.node(y).grad;
            if (g.requires_grad(x)) kernels::add(g.node(x).grad.data(), dy.data(), (int)dy.size());
        });
    }

    // numerically stabilized softmax along the given axis
    Var softmax(Var x, int axis) {
        const Tensor& tx = value(x);
        const int nd = tx.ndim();
        if (axis < 0) axis += nd;
        if (axis < 0 || axis >= nd) throw ArgumentError("softmax: invalid axis");
        const int len = tx.shape[axis];
        int64_t inner = 1;
        for (int i = axis + 1; i < nd; ++i) inner *= tx.shape[i];
        int64_t outer = tx.numel() / (static_cast<int64_t>(len) * inner);
        Tensor out(tx.shape);
        std::vector<float> buf(static_cast<size_t>(len));
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                for (int i = 0; i < len; ++i) buf[i] = tx.data[base + i * inner];
                kernels::softmax_row(buf.data(), len);
                for (int i = 0; i < len; ++i) out.data[base + i * inner] = buf[i];
            }
        }
        return make(std::move(out), {x}, [x, len, inner, outer](Graph& g, Var y) {
            if (!g.requires_grad(x)) return;
            const auto& dy = g.node(y).grad;
            const auto& vy = g.value(y).data;
            auto& dx = g.node(x).grad;
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    float dotv = 0.0f;
                    for (int i = 0; i < len; ++i) dotv += dy[base + i * inner] * vy[base + i * inner];
                    for (int i = 0; i < len; ++i)
                        dx[base + i * inner] +=
                            (dy[base + i * inner] - dotv) * vy[base + i * inner];
                }
            }
        });
    }

    enum class Reduction { Mean, Sum };

    // logits: [T x V]; mean (or sum) negative log-softmax over rows whose
    // target != ignore_index. All rows ignored -> 0 with zero gradient.
    Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index = -1,
                      Reduction red = Reduction::Mean) {
        const Tensor& tl = value(logits);
        require(tl.ndim() == 2, "cross_entropy: logits must be [T x V]");
        const int T = tl.rows(), V = tl.cols();
        require(static_cast<int>(targets.size()) == T, "cross_entropy: target length mismatch");
        int kept = 0;
        for (int t : targets) {
            if (t == ignore_index) continue;
            if (t < 0 || t >= V) throw ArgumentError("cross_entropy: target out of range");
            ++kept;
        }
        float loss = 0.0f;
        for (int t = 0; t < T; ++t) {
            if (targets[t] == ignore_index) continue;
            const float lse = kernels::logsumexp_row(tl.row(t), V);
            loss += lse - tl.at(t, targets[t]);
        }
        if (kept > 0 && red == Reduction::Mean) loss /= static_cast<float>(kept);
        if (kept == 0) loss = 0.0f;
        auto tgt = std::make_shared<std::vector<int>>(targets);
        return make(Tensor({1}, {loss}), {logits},
                    [logits, tgt, ignore_index, red, kept, T, V](Graph& g, Var y) {
                        if (!g.requires_grad(logits) || kept == 0) return;
                        const float dy = g.node(y).grad[0];
                        const float w =
                            red == Reduction::Mean ? dy / static_cast<float>(kept) : dy;
                        const Tensor& vl = g.value(logits);
                        auto& dl = g.node(logits).grad;
                        std::vector<float> p(static_cast<size_t>(V));
                        for (int t = 0; t < T; ++t) {
                            if ((*tgt)[t] == ignore_index) continue;
                            kernels::copy(p.data(), vl.row(t), V);
                            kernels::softmax_row(p.data(), V);
                            float* dr = dl.data() + static_cast<size_t>(t) * V;
                            for (int j = 0; j < V; ++j) dr[j] += w * p[j];
                            dr[(*tgt)[t]] -= w;
                        }
                    });
    }

    // ---- reverse sweep ----

    void backward(Var loss) {
        const auto& ln = node(loss);
        if (ln.val().numel() != 1) throw ArgumentError("backward: loss must be scalar");
        if (!ln.requires_grad) return;  // nothing trainable reaches the loss
        node(loss).grad[0] = 1.0f;
        for (int i = loss.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            if (n.requires_grad && n.backward_fn) n.backward_fn(*this);
        }
    }

    // gradients of named leaves, keyed by name (sorted)
    std::map<std::string, Tensor> named_gradients() const {
        std::map<std::string, Tensor> out;
        for (const auto& n : nodes_) {
            if (n.name.empty() || !n.requires_grad) continue;
            Tensor t(n.val().shape);
            t.data = n.grad;
            out[n.name] = std::move(t);
        }
        return out;
    }

    size_t size() const { return nodes_.size(); }

    detail::Node& node(Var v) {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw ArgumentError("Graph: invalid node handle");
        return nodes_[static_cast<size_t>(v.id)];
    }
    const detail::Node& node(Var v) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw ArgumentError("Graph: invalid node handle");
        return nodes_[static_cast<size_t>(v.id)];
    }

private:
    static void require(bool ok, const std::string& msg) {
        if (!ok) throw ArgumentError(msg);
    }

    Var push(detail::Node n) {
        if (n.requires_grad) n.grad.assign(static_cast<size_t>(n.val().numel()), 0.0f);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var make(Tensor out, const std::vector<Var>& parents,
             std::function<void(Graph&, Var)> backward) {
        bool rg = false;
        for (Var p : parents) rg = rg || node(p).requires_grad;
        detail::Node n;
        n.owned = std::move(out);
        n.requires_grad = rg;
        Var v = push(std::move(n));
        if (rg) {
            auto fn = std::move(backward);
            nodes_.back().backward_fn = [fn, v](Graph& g) { fn(g, v); };
        }
        return v;
    }

    std::vector<detail::Node> nodes_;
    std::map<std::string, Var> named_leaves_;
};

}  // namespace goat
