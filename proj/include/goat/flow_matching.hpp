// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "goat/autodiff.hpp"
#include "goat/errors.hpp"
#include "goat/io.hpp"
#include "goat/kernels.hpp"
#include "goat/param_store.hpp"
#include "goat/rng.hpp"
#include "goat/toy_world.hpp"

namespace goat {

// Conditional flow matching with the linear optimal-transport path:
//   x_t = (1-t) x0 + t x1,  v_target = x1 - x0,  x0 ~ N(0, I).
// The vector field is a small MLP conditioned on the frame's token and its
// +-1 neighbors; sampling integrates the field with a fixed-step Euler loop.

struct CFMConfig {
    int frame_dim = 16;
    int speech_vocab = 257;
    int emb_dim = 32;
    int hidden = 128;
    int time_feats = 8;
    int default_steps = 16;

    int input_dim() const { return frame_dim + 3 * emb_dim + time_feats; }

    KvConfig to_kv() const {
        KvConfig kv;
        kv.set_int("frame_dim", frame_dim);
        kv.set_int("speech_vocab", speech_vocab);
        kv.set_int("emb_dim", emb_dim);
        kv.set_int("hidden", hidden);
        kv.set_int("time_feats", time_feats);
        kv.set_int("default_steps", default_steps);
        return kv;
    }

    static CFMConfig from_kv(const KvConfig& kv) {
        CFMConfig cfg;
        cfg.frame_dim = static_cast<int>(kv.get_int("frame_dim", cfg.frame_dim));
        cfg.speech_vocab = static_cast<int>(kv.get_int("speech_vocab", cfg.speech_vocab));
        cfg.emb_dim = static_cast<int>(kv.get_int("emb_dim", cfg.emb_dim));
        cfg.hidden = static_cast<int>(kv.get_int("hidden", cfg.hidden));
        cfg.time_feats = static_cast<int>(kv.get_int("time_feats", cfg.time_feats));
        cfg.default_steps = static_cast<int>(kv.get_int("default_steps", cfg.default_steps));
        return cfg;
    }
};

inline void time_features(float t, float* out, int n) {
    out[0] = t;
    out[1] = 1.0f - t;
    const float two_pi = 6.2831853071795864f;
    for (int i = 2; i + 1 < n; i += 2) {
        const float freq = static_cast<float>(1 << (i / 2 - 1));
        out[i] = std::sin(two_pi * freq * t);
        out[i + 1] = std::cos(two_pi * freq * t);
    }
}

struct CFMPath {
    std::vector<float> x_t;
    std::vector<float> v_target;
};

inline CFMPath cfm_target(const std::vector<float>& x0, const std::vector<float>& x1, float t) {
    if (x0.size() != x1.size()) throw ArgumentError("cfm_target: shape mismatch");
    if (!(t >= 0.0f && t <= 1.0f)) throw ArgumentError("cfm_target: t outside [0, 1]");
    CFMPath p;
    p.x_t.resize(x0.size());
    p.v_target.resize(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) {
        p.x_t[i] = (1.0f - t) * x0[i] + t * x1[i];
        p.v_target[i] = x1[i] - x0[i];
    }
    return p;
}

class CFMModel {
public:
    CFMModel(CFMConfig cfg, uint64_t seed) : cfg_(cfg) {
        Rng rng(hash_combine(seed, 0x63666dull));
        auto he = [&](std::vector<int> shape, int fan_in) {
            return Tensor::randn(std::move(shape), rng,
                                 1.0f / std::sqrt(static_cast<float>(fan_in)));
        };
        params_.add("cfm.tok_emb", Tensor::randn({cfg.speech_vocab, cfg.emb_dim}, rng, 0.05f));
        params_.add("cfm.w1", he({cfg.input_dim(), cfg.hidden}, cfg.input_dim()));
        params_.add("cfm.b1", Tensor({cfg.hidden}));
        params_.add("cfm.w2", he({cfg.hidden, cfg.hidden}, cfg.hidden));
        params_.add("cfm.b2", Tensor({cfg.hidden}));
        params_.add("cfm.w3", he({cfg.hidden, cfg.frame_dim}, cfg.hidden));
        params_.add("cfm.b3", Tensor({cfg.frame_dim}));
    }

    CFMModel(CFMConfig cfg, ParamStore params) : cfg_(cfg), params_(std::move(params)) {}

    const CFMConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // conditioning triple for body position p: (prev, cur, next), EOS-padded
    // at the boundaries
    std::array<int, 3> cond_tokens(const std::vector<int>& body, int p) const {
        const int pad = cfg_.speech_vocab - 1;
        auto tok = [&](int i) {
            return (i < 0 || i >= static_cast<int>(body.size())) ? pad : body[static_cast<size_t>(i)];
        };
        return {tok(p - 1), tok(p), tok(p + 1)};
    }

    // graph builder: v_hat rows for a batch of (x_t, t, cond) samples
    template <typename G>
    Var v_hat(G& g, Var x_rows, const std::vector<float>& ts,
              const std::vector<std::array<int, 3>>& conds) const {
        const int n = static_cast<int>(ts.size());
        std::vector<int> prev, cur, next;
        for (const auto& c : conds) {
            prev.push_back(c[0]);
            cur.push_back(c[1]);
            next.push_back(c[2]);
        }
        Var emb = g.concat_cols(
            g.concat_cols(g.embedding(params_.leaf(g, "cfm.tok_emb"), prev),
                          g.embedding(params_.leaf(g, "cfm.tok_emb"), cur)),
            g.embedding(params_.leaf(g, "cfm.tok_emb"), next));
        Tensor tf({n, cfg_.time_feats});
        for (int i = 0; i < n; ++i)
            time_features(ts[static_cast<size_t>(i)], tf.row(i), cfg_.time_feats);
        Var input = g.concat_cols(g.concat_cols(x_rows, emb), g.leaf(std::move(tf)));
        Var h = g.gelu(g.add_bias(g.matmul(input, params_.leaf(g, "cfm.w1")),
                                  params_.leaf(g, "cfm.b1")));
        h = g.gelu(g.add_bias(g.matmul(h, params_.leaf(g, "cfm.w2")), params_.leaf(g, "cfm.b2")));
        return g.add_bias(g.matmul(h, params_.leaf(g, "cfm.w3")), params_.leaf(g, "cfm.b3"));
    }

    // plain inference evaluation of the field for one frame position
    void eval_field(const float* x, float t, const std::array<int, 3>& cond, float* out) const {
        const int in_dim = cfg_.input_dim();
        std::vector<float> input(static_cast<size_t>(in_dim));
        kernels::copy(input.data(), x, cfg_.frame_dim);
        const Tensor& emb = params_.value("cfm.tok_emb");
        float* p = input.data() + cfg_.frame_dim;
        for (int j = 0; j < 3; ++j) {
            kernels::copy(p, emb.row(cond[static_cast<size_t>(j)]), cfg_.emb_dim);
            p += cfg_.emb_dim;
        }
        time_features(t, p, cfg_.time_feats);

        std::vector<float> h1(static_cast<size_t>(cfg_.hidden));
        kernels::matvec_rowmajor(h1.data(), input.data(), params_.value("cfm.w1").data.data(),
                                 params_.value("cfm.b1").data.data(), in_dim, cfg_.hidden);
        for (auto& v : h1) v = kernels::gelu(v);
        std::vector<float> h2(static_cast<size_t>(cfg_.hidden));
        kernels::matvec_rowmajor(h2.data(), h1.data(), params_.value("cfm.w2").data.data(),
                                 params_.value("cfm.b2").data.data(), cfg_.hidden, cfg_.hidden);
        for (auto& v : h2) v = kernels::gelu(v);
        kernels::matvec_rowmajor(out, h2.data(), params_.value("cfm.w3").data.data(),
                                 params_.value("cfm.b3").data.data(), cfg_.hidden, cfg_.frame_dim);
    }

    void save(const std::string& checkpoint_path, const std::string& config_path) const {
        save_checkpoint(params_, checkpoint_path);
        cfg_.to_kv().save(config_path);
    }

    static CFMModel load(const std::string& checkpoint_path, const std::string& config_path) {
        CFMConfig cfg = CFMConfig::from_kv(KvConfig::load(config_path));
        return CFMModel(cfg, load_checkpoint(checkpoint_path));
    }

private:
    CFMConfig cfg_;
    ParamStore params_;
};

struct CFMTrainSpec {
    int steps = 2000;
    int batch_size = 32;
    float lr = 1e-3f;
    uint64_t seed = 0;
};

struct CFMReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_every_100;

    Json to_json() const {
        Json j;
        j["initial_loss"] = initial_loss;
        j["final_loss"] = final_loss;
        j["loss_every_100"] = loss_every_100;
        return j;
    }
};

// Regression of the vector field against v_target over random (item, frame,
// t, x0) draws. Pairs must satisfy the codec length contract.
inline CFMReport cfm_train(CFMModel& model,
                           const std::vector<std::pair<SpeechTokens, SpeechFrames>>& dataset,
                           const CFMTrainSpec& spec) {
    if (dataset.empty()) throw ArgumentError("cfm_train: empty dataset");
    for (const auto& [tokens, frames] : dataset)
        if (tokens.body_len() != frames.rows())
            throw DataError("cfm_train: token/frame length mismatch");
    const CFMConfig& cfg = model.config();
    Rng rng(hash_combine(spec.seed, 0x63666d74ull));
    AdamHyper hyper;
    hyper.lr = spec.lr;
    model.params().reset_optimizer();

    CFMReport report;
    for (int step = 0; step < spec.steps; ++step) {
        Graph g;
        Tensor x_rows({spec.batch_size, cfg.frame_dim});
        Tensor v_rows({spec.batch_size, cfg.frame_dim});
        std::vector<float> ts(static_cast<size_t>(spec.batch_size));
        std::vector<std::array<int, 3>> conds;
        for (int b = 0; b < spec.batch_size; ++b) {
            const auto& [tokens, frames] =
                dataset[static_cast<size_t>(rng.uniform_int(static_cast<int>(dataset.size())))];
            std::vector<int> body(tokens.ids.begin(), tokens.ids.end() - 1);
            const int p = rng.uniform_int(frames.rows());
            const float t = rng.uniform(0.0f, 1.0f);
            std::vector<float> x0(static_cast<size_t>(cfg.frame_dim));
            for (auto& v : x0) v = rng.normal();
            const std::vector<float> x1(frames.row(p), frames.row(p) + cfg.frame_dim);
            auto path = cfm_target(x0, x1, t);
            kernels::copy(x_rows.row(b), path.x_t.data(), cfg.frame_dim);
            kernels::copy(v_rows.row(b), path.v_target.data(), cfg.frame_dim);
            ts[static_cast<size_t>(b)] = t;
            conds.push_back(model.cond_tokens(body, p));
        }
        Var pred = model.v_hat(g, g.leaf(std::move(x_rows)), ts, conds);
        Var diff = g.sub(pred, g.leaf(std::move(v_rows)));
        Var loss = g.scale(g.sum_all(g.mul(diff, diff)),
                           1.0f / static_cast<float>(spec.batch_size * cfg.frame_dim));
        const double lv = static_cast<double>(g.value(loss).data[0]);
        if (step == 0) report.initial_loss = lv;
        if (step % 100 == 0) report.loss_every_100.push_back(lv);
        if (step + 1 == spec.steps) report.final_loss = lv;
        g.backward(loss);
        adam_step(model.params(), g.named_gradients(), hyper);
    }
    return report;
}

// Euler integration of an arbitrary field; the oracle-injection tests drive
// this directly with the analytic constant field.
template <typename Field>
std::vector<float> euler_integrate(Field&& field, std::vector<float> x, int steps) {
    if (steps < 1) throw ArgumentError("euler_integrate: steps must be >= 1");
    const float dt = 1.0f / static_cast<float>(steps);
    std::vector<float> v(x.size());
    for (int i = 0; i < steps; ++i) {
        const float t = static_cast<float>(i) / static_cast<float>(steps);
        field(x.data(), t, v.data());
        kernels::accum_scaled(x.data(), v.data(), dt, static_cast<int>(x.size()));
    }
    return x;
}

// per-frame noise draw keyed by (seed, global frame index): chunked decoding
// reproduces the whole-sequence decode exactly
inline std::vector<float> cfm_noise(uint64_t seed, int position, int frame_dim) {
    Rng rng(hash_combine(hash_combine(seed, 0x78306e6full), static_cast<uint64_t>(position)));
    std::vector<float> x(static_cast<size_t>(frame_dim));
    for (auto& v : x) v = rng.normal();
    return x;
}

// decode body positions [from, to) against the full token context
inline SpeechFrames euler_sample_range(const CFMModel& model, const std::vector<int>& body,
                                       int from, int to, int steps, uint64_t seed,
                                       int frame_rate) {
    const CFMConfig& cfg = model.config();
    SpeechFrames out;
    out.frame_dim = cfg.frame_dim;
    out.frame_rate = frame_rate;
    for (int p = from; p < to; ++p) {
        const auto cond = model.cond_tokens(body, p);
        auto x = euler_integrate(
            [&](const float* xv, float t, float* v) { model.eval_field(xv, t, cond, v); },
            cfm_noise(seed, p, cfg.frame_dim), steps);
        out.data.insert(out.data.end(), x.begin(), x.end());
    }
    return out;
}

// tokens -> frames via the learned field; deterministic for a fixed seed
inline SpeechFrames euler_sample(const CFMModel& model, const SpeechTokens& tokens, int steps,
                                 uint64_t seed, int frame_rate = 2) {
    if (tokens.ids.empty() || tokens.ids.back() != model.config().speech_vocab - 1)
        throw DataError("euler_sample: token sequence must end with EOS");
    std::vector<int> body(tokens.ids.begin(), tokens.ids.end() - 1);
    return euler_sample_range(model, body, 0, static_cast<int>(body.size()), steps, seed,
                              frame_rate);
}

}  // namespace goat
