// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "goat/errors.hpp"
#include "goat/kernels.hpp"
#include "goat/model.hpp"
#include "goat/param_store.hpp"
#include "goat/rng.hpp"

namespace goat {

// Incremental forward pass with per-layer KV caches: shared bottom stack plus
// the speech-branch top. Uses the same kernels and the same scalar order as
// the autodiff graph, so feeding the rows of an assembled sequence reproduces
// forward_speech_branch() bitwise.
class InferEngine {
public:
    explicit InferEngine(const DualBranchModel& model) : model_(model) {
        const ModelConfig& cfg = model.config();
        caches_.resize(static_cast<size_t>(cfg.layers));
        block_names_.reserve(static_cast<size_t>(cfg.layers));
        for (int l = 0; l < cfg.frozen_layers; ++l)
            block_names_.push_back("lm.block" + std::to_string(l) + ".");
        for (int l = cfg.frozen_layers; l < cfg.layers; ++l)
            block_names_.push_back("speech.block" + std::to_string(l) + ".");
    }

    void reset() {
        for (auto& c : caches_) {
            c.k.clear();
            c.v.clear();
        }
        position_ = 0;
    }

    int positions() const { return position_; }

    // feeds one embedding row, returns the speech-branch hidden state after
    // the final layer norm
    std::vector<float> feed(const std::vector<float>& embedding) {
        const ModelConfig& cfg = model_.config();
        const int d = cfg.d_model;
        if (static_cast<int>(embedding.size()) != d)
            throw ArgumentError("InferEngine: embedding width mismatch");
        if (position_ >= cfg.context)
            throw ArgumentError("InferEngine: context window exhausted");

        std::vector<float> x(embedding);
        const Tensor& pos = model_.params().value("lm.pos_emb");
        kernels::add(x.data(), pos.row(position_), d);

        for (size_t l = 0; l < block_names_.size(); ++l)
            block_forward(x, block_names_[l], caches_[l]);

        std::vector<float> out(static_cast<size_t>(d));
        const Tensor& g = model_.params().value("speech.final_ln.g");
        const Tensor& b = model_.params().value("speech.final_ln.b");
        kernels::layernorm_row(out.data(), x.data(), g.data.data(), b.data.data(), d, 1e-5f);
        position_ += 1;
        return out;
    }

private:
    struct BlockCache {
        std::vector<float> k;  // position-major [pos x d]
        std::vector<float> v;
    };

    const Tensor& P(const std::string& name) const { return model_.params().value(name); }

    void block_forward(std::vector<float>& x, const std::string& base, BlockCache& cache) {
        const ModelConfig& cfg = model_.config();
        const int d = cfg.d_model;
        const int heads = cfg.n_heads;
        const int dh = d / heads;
        const int t = position_;  // rows already cached

        std::vector<float> normed(static_cast<size_t>(d));
        kernels::layernorm_row(normed.data(), x.data(), P(base + "ln1.g").data.data(),
                               P(base + "ln1.b").data.data(), d, 1e-5f);

        std::vector<float> q(static_cast<size_t>(d)), k(static_cast<size_t>(d)),
            v(static_cast<size_t>(d));
        kernels::matvec_rowmajor(q.data(), normed.data(), P(base + "attn.wq").data.data(),
                                 P(base + "attn.bq").data.data(), d, d);
        kernels::matvec_rowmajor(k.data(), normed.data(), P(base + "attn.wk").data.data(),
                                 P(base + "attn.bk").data.data(), d, d);
        kernels::matvec_rowmajor(v.data(), normed.data(), P(base + "attn.wv").data.data(),
                                 P(base + "attn.bv").data.data(), d, d);
        cache.k.insert(cache.k.end(), k.begin(), k.end());
        cache.v.insert(cache.v.end(), v.begin(), v.end());

        const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
        std::vector<float> mixed(static_cast<size_t>(d), 0.0f);
        std::vector<float> scores(static_cast<size_t>(t) + 1);
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int j = 0; j <= t; ++j)
                scores[static_cast<size_t>(j)] =
                    kernels::dot(q.data() + off, cache.k.data() + static_cast<size_t>(j) * d + off,
                                 dh) *
                    inv_sqrt;
            kernels::softmax_row(scores.data(), t + 1);
            float* out = mixed.data() + off;
            for (int j = 0; j <= t; ++j)
                kernels::accum_scaled(out, cache.v.data() + static_cast<size_t>(j) * d + off,
                                      scores[static_cast<size_t>(j)], dh);
        }
        std::vector<float> attn(static_cast<size_t>(d));
        kernels::matvec_rowmajor(attn.data(), mixed.data(), P(base + "attn.wo").data.data(),
                                 P(base + "attn.bo").data.data(), d, d);
        kernels::add(x.data(), attn.data(), d);

        kernels::layernorm_row(normed.data(), x.data(), P(base + "ln2.g").data.data(),
                               P(base + "ln2.b").data.data(), d, 1e-5f);
        const int hidden = d * cfg.mlp_ratio;
        std::vector<float> h1(static_cast<size_t>(hidden));
        kernels::matvec_rowmajor(h1.data(), normed.data(), P(base + "mlp.w1").data.data(),
                                 P(base + "mlp.b1").data.data(), d, hidden);
        for (auto& val : h1) val = kernels::gelu(val);
        std::vector<float> h2(static_cast<size_t>(d));
        kernels::matvec_rowmajor(h2.data(), h1.data(), P(base + "mlp.w2").data.data(),
                                 P(base + "mlp.b2").data.data(), hidden, d);
        kernels::add(x.data(), h2.data(), d);
    }

    const DualBranchModel& model_;
    std::vector<BlockCache> caches_;
    std::vector<std::string> block_names_;
    int position_ = 0;
};

enum class DecodeMode { Greedy, Sampled };

// One grouped multi-token prediction step: the speech head emits the group's
// first token from the backbone hidden state, then each MTP sub-head emits
// the next token from (hidden ++ embedding of the previous token). Stops
// early at EOS. Greedy mode breaks ties by lowest token id.
inline std::vector<int> mtp_step(const DualBranchModel& model, const std::vector<float>& hidden,
                                 DecodeMode mode, Rng& rng) {
    const ModelConfig& cfg = model.config();
    const int d = cfg.d_model;
    const int vs = cfg.speech_vocab;
    const int eos = vs - 1;
    if (static_cast<int>(hidden.size()) != d) throw ArgumentError("mtp_step: hidden width mismatch");

    std::vector<float> logits(static_cast<size_t>(vs));
    std::vector<float> joint(static_cast<size_t>(2 * d));
    std::vector<int> out;
    out.reserve(static_cast<size_t>(cfg.group_size));
    for (int sub = 0; sub < cfg.group_size; ++sub) {
        if (sub == 0) {
            kernels::matvec_rowmajor(logits.data(), hidden.data(),
                                     model.params().value("speech.head.w").data.data(),
                                     model.params().value("speech.head.b").data.data(), d, vs);
        } else {
            kernels::copy(joint.data(), hidden.data(), d);
            kernels::copy(joint.data() + d,
                          model.params().value("speech.tok_emb").row(out.back()), d);
            const std::string base = "speech.mtp" + std::to_string(sub) + ".";
            kernels::matvec_rowmajor(logits.data(), joint.data(),
                                     model.params().value(base + "w").data.data(),
                                     model.params().value(base + "b").data.data(), 2 * d, vs);
        }
        int tok;
        if (mode == DecodeMode::Greedy) {
            tok = 0;
            for (int j = 1; j < vs; ++j)
                if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(tok)]) tok = j;
        } else {
            kernels::softmax_row(logits.data(), vs);
            double x = rng.next_double();
            tok = vs - 1;
            for (int j = 0; j < vs; ++j) {
                x -= static_cast<double>(logits[static_cast<size_t>(j)]);
                if (x < 0.0) {
                    tok = j;
                    break;
                }
            }
        }
        out.push_back(tok);
        if (tok == eos) break;
    }
    return out;
}

// group feedback row: mean of the group's token embeddings
inline std::vector<float> group_feedback(const DualBranchModel& model,
                                         const std::vector<int>& group) {
    const int d = model.config().d_model;
    std::vector<float> out(static_cast<size_t>(d), 0.0f);
    const Tensor& emb = model.params().value("speech.tok_emb");
    for (int tok : group) kernels::add(out.data(), emb.row(tok), d);
    const float inv = 1.0f / static_cast<float>(group.size());
    for (auto& v : out) v *= inv;
    return out;
}

}  // namespace goat
