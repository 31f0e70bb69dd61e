// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "goat/autodiff.hpp"
#include "goat/errors.hpp"
#include "goat/io.hpp"
#include "goat/param_store.hpp"
#include "goat/toy_world.hpp"

namespace goat {

// paper rule: freeze the bottom floor(M/2) layers, tune the top M - N
inline std::pair<int, int> freeze_plan(int total_layers) {
    if (total_layers < 2) throw ArgumentError("freeze_plan: need at least 2 layers");
    const int frozen = total_layers / 2;
    return {frozen, total_layers - frozen};
}

struct ModelConfig {
    int layers = 8;        // M
    int frozen_layers = 4; // N
    int tuned_layers = 4;  // K
    int d_model = 64;
    int n_heads = 4;
    int context = 512;
    int group_size = 4;    // G speech tokens per backbone step
    int text_vocab = 42;
    int speech_vocab = 257;
    int frame_dim = 16;
    int frame_rate = 2;
    int enc_dim = 32;
    int enc_heads = 4;
    int enc_layers = 2;
    int mlp_ratio = 4;
    int lookahead = 4;     // W text tokens before the first speech group

    static ModelConfig from_toy(const ToyConfig& toy) {
        ModelConfig cfg;
        cfg.text_vocab = toy.text_vocab();
        cfg.speech_vocab = toy.speech_vocab;
        cfg.frame_dim = toy.frame_dim;
        cfg.frame_rate = toy.frame_rate;
        auto [n, k] = freeze_plan(cfg.layers);
        cfg.frozen_layers = n;
        cfg.tuned_layers = k;
        return cfg;
    }

    void validate() const {
        if (layers < 2) throw ArgumentError("ModelConfig: need at least 2 layers");
        if (frozen_layers + tuned_layers != layers)
            throw ArgumentError("ModelConfig: N + K must equal M");
        if (frozen_layers < 1 || tuned_layers < 1)
            throw ArgumentError("ModelConfig: both branch segments need layers");
        if (d_model % n_heads != 0 || enc_dim % enc_heads != 0)
            throw ArgumentError("ModelConfig: model width must divide head count");
        if (group_size < 1) throw ArgumentError("ModelConfig: group_size must be >= 1");
        if (context < 8) throw ArgumentError("ModelConfig: context too small");
        if (lookahead < (group_size + frame_rate - 1) / frame_rate)
            throw ArgumentError("ModelConfig: lookahead below the emission rate");
    }

    int text_per_group() const { return std::max(1, group_size / frame_rate); }

    KvConfig to_kv() const {
        KvConfig kv;
        kv.set_int("layers", layers);
        kv.set_int("frozen_layers", frozen_layers);
        kv.set_int("tuned_layers", tuned_layers);
        kv.set_int("d_model", d_model);
        kv.set_int("n_heads", n_heads);
        kv.set_int("context", context);
        kv.set_int("group_size", group_size);
        kv.set_int("text_vocab", text_vocab);
        kv.set_int("speech_vocab", speech_vocab);
        kv.set_int("frame_dim", frame_dim);
        kv.set_int("frame_rate", frame_rate);
        kv.set_int("enc_dim", enc_dim);
        kv.set_int("enc_heads", enc_heads);
        kv.set_int("enc_layers", enc_layers);
        kv.set_int("mlp_ratio", mlp_ratio);
        kv.set_int("lookahead", lookahead);
        return kv;
    }

    static ModelConfig from_kv(const KvConfig& kv) {
        ModelConfig cfg;
        cfg.layers = static_cast<int>(kv.get_int("layers", cfg.layers));
        cfg.frozen_layers = static_cast<int>(kv.get_int("frozen_layers", cfg.layers / 2));
        cfg.tuned_layers =
            static_cast<int>(kv.get_int("tuned_layers", cfg.layers - cfg.frozen_layers));
        cfg.d_model = static_cast<int>(kv.get_int("d_model", cfg.d_model));
        cfg.n_heads = static_cast<int>(kv.get_int("n_heads", cfg.n_heads));
        cfg.context = static_cast<int>(kv.get_int("context", cfg.context));
        cfg.group_size = static_cast<int>(kv.get_int("group_size", cfg.group_size));
        cfg.text_vocab = static_cast<int>(kv.get_int("text_vocab", cfg.text_vocab));
        cfg.speech_vocab = static_cast<int>(kv.get_int("speech_vocab", cfg.speech_vocab));
        cfg.frame_dim = static_cast<int>(kv.get_int("frame_dim", cfg.frame_dim));
        cfg.frame_rate = static_cast<int>(kv.get_int("frame_rate", cfg.frame_rate));
        cfg.enc_dim = static_cast<int>(kv.get_int("enc_dim", cfg.enc_dim));
        cfg.enc_heads = static_cast<int>(kv.get_int("enc_heads", cfg.enc_heads));
        cfg.enc_layers = static_cast<int>(kv.get_int("enc_layers", cfg.enc_layers));
        cfg.mlp_ratio = static_cast<int>(kv.get_int("mlp_ratio", cfg.mlp_ratio));
        cfg.lookahead = static_cast<int>(kv.get_int("lookahead", cfg.lookahead));
        return cfg;
    }
};

// raised when an assembled sequence would exceed the context window
struct ContextOverflowError : ArgumentError {
    using ArgumentError::ArgumentError;
};

// ---- sequence layout shared by training, offline synthesis and streaming ----

enum class SlotKind { Query, Sep, Text, Group, Eot };

struct Slot {
    SlotKind kind;
    int index;  // query row / text token index / group index
};

// Canonical generation-mode position schedule: all query rows, a separator,
// the first W text tokens, then one speech group per ceil(G/R_f) text tokens,
// EOT once the text ends, then groups only. Streaming follows the same
// schedule incrementally, which is what makes any chunking reproduce the
// offline sequence exactly.
inline std::vector<Slot> generation_layout(int query_rows, int text_len, int n_groups,
                                           const ModelConfig& cfg) {
    std::vector<Slot> slots;
    slots.reserve(static_cast<size_t>(query_rows + text_len + n_groups + 2));
    for (int i = 0; i < query_rows; ++i) slots.push_back({SlotKind::Query, i});
    slots.push_back({SlotKind::Sep, 0});
    const int W = cfg.lookahead;
    const int q = cfg.text_per_group();
    int texts = 0, groups = 0;
    while (texts < std::min(W, text_len)) slots.push_back({SlotKind::Text, texts++});
    bool eot = false;
    while (groups < n_groups) {
        slots.push_back({SlotKind::Group, groups++});
        for (int i = 0; i < q && texts < text_len; ++i) slots.push_back({SlotKind::Text, texts++});
        if (texts == text_len && !eot) {
            slots.push_back({SlotKind::Eot, 0});
            eot = true;
        }
    }
    if (!eot) slots.push_back({SlotKind::Eot, 0});
    return slots;
}

// ---- the dual-branch model ----

class DualBranchModel {
public:
    DualBranchModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        init_params(seed);
        sync_speech_branch();
    }

    DualBranchModel(ModelConfig cfg, ParamStore params)
        : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // Copies the text-branch top-K layers into the speech branch. Called at
    // construction and again when Stage II starts, so both branches share
    // weights bitwise at that point.
    void sync_speech_branch() {
        for (int l = cfg_.frozen_layers; l < cfg_.layers; ++l)
            for (const auto& part : block_part_names()) {
                const std::string src = "text.block" + std::to_string(l) + "." + part;
                const std::string dst = "speech.block" + std::to_string(l) + "." + part;
                params_.value(dst) = params_.value(src);
            }
        params_.value("speech.final_ln.g") = params_.value("text.final_ln.g");
        params_.value("speech.final_ln.b") = params_.value("text.final_ln.b");
    }

    // parameter-name predicates used by the training freeze schedule
    static bool is_encoder(const std::string& n) { return n.rfind("enc.", 0) == 0; }
    static bool is_projector(const std::string& n) { return n.rfind("proj.", 0) == 0; }
    static bool is_shared_bottom(const std::string& n) { return n.rfind("lm.", 0) == 0; }
    static bool is_text_branch(const std::string& n) { return n.rfind("text.", 0) == 0; }
    static bool is_speech_branch(const std::string& n) { return n.rfind("speech.", 0) == 0; }

    // ---- forward builders (run on Graph or Graph64) ----

    template <typename G>
    Var frames_leaf(G& g, const SpeechFrames& frames) const {
        if (frames.empty()) throw ArgumentError("frames_leaf: empty frames");
        Tensor t({frames.rows(), frames.frame_dim});
        t.data = frames.data;
        return g.leaf(std::move(t), false, "");
    }

    // frames [T_f x F] -> latents [ceil(T_f/2) x enc_dim]
    template <typename G>
    Var encode_speech(G& g, Var frames) const {
        Var x = g.conv1d(frames, P(g, "enc.conv1.w"), P(g, "enc.conv1.b"), 1, 1, 1);
        x = g.gelu(x);
        x = g.conv1d(x, P(g, "enc.conv2.w"), P(g, "enc.conv2.b"), 2, 1, 1);
        x = g.gelu(x);
        const int rows = rows_of(g, x);
        if (rows > cfg_.context) throw ContextOverflowError("encode_speech: too many frames");
        x = g.add(x, g.gather_rows(P(g, "enc.pos"), iota(rows)));
        for (int l = 0; l < cfg_.enc_layers; ++l)
            x = transformer_block(g, x, "enc.block" + std::to_string(l) + ".", cfg_.enc_heads);
        return g.layer_norm(x, P(g, "enc.final_ln.g"), P(g, "enc.final_ln.b"));
    }

    // exactly three conv layers (middle one stride 2) + linear map to d_model
    template <typename G>
    Var project(G& g, Var latent) const {
        Var x = g.conv1d(latent, P(g, "proj.conv1.w"), P(g, "proj.conv1.b"), 1, 1, 1);
        x = g.gelu(x);
        x = g.conv1d(x, P(g, "proj.conv2.w"), P(g, "proj.conv2.b"), 2, 1, 1);
        x = g.gelu(x);
        x = g.conv1d(x, P(g, "proj.conv3.w"), P(g, "proj.conv3.b"), 1, 1, 1);
        x = g.gelu(x);
        return g.add_bias(g.matmul(x, P(g, "proj.lin.w")), P(g, "proj.lin.b"));
    }

    template <typename G>
    Var embed_prompt(G& g, const SpeechFrames& frames) const {
        return project(g, encode_speech(g, frames_leaf(g, frames)));
    }

    // documented closed form for the projector parameter count
    int64_t projector_param_count() const {
        const int e = cfg_.enc_dim, d = cfg_.d_model;
        return (3LL * e * d + d) + 2 * (3LL * d * d + d) + (static_cast<int64_t>(d) * d + d);
    }

    template <typename G>
    Var embed_text(G& g, const std::vector<int>& tokens) const {
        return g.embedding(P(g, "lm.tok_emb"), tokens);
    }

    // shared bottom-N stack; adds learned absolute positions
    template <typename G>
    Var forward_bottom(G& g, Var emb) const {
        const int rows = rows_of(g, emb);
        if (rows > cfg_.context)
            throw ArgumentError("forward_bottom: sequence exceeds context window");
        Var x = g.add(emb, g.gather_rows(P(g, "lm.pos_emb"), iota(rows)));
        for (int l = 0; l < cfg_.frozen_layers; ++l)
            x = transformer_block(g, x, "lm.block" + std::to_string(l) + ".", cfg_.n_heads);
        return x;
    }

    template <typename G>
    Var forward_text_hidden(G& g, Var bottom) const {
        Var x = bottom;
        for (int l = cfg_.frozen_layers; l < cfg_.layers; ++l)
            x = transformer_block(g, x, "text.block" + std::to_string(l) + ".", cfg_.n_heads);
        return g.layer_norm(x, P(g, "text.final_ln.g"), P(g, "text.final_ln.b"));
    }

    template <typename G>
    Var forward_text_top(G& g, Var bottom) const {
        Var x = forward_text_hidden(g, bottom);
        return g.add_bias(g.matmul(x, P(g, "text.head.w")), P(g, "text.head.b"));
    }

    template <typename G>
    Var forward_speech_top(G& g, Var bottom) const {
        Var x = bottom;
        for (int l = cfg_.frozen_layers; l < cfg_.layers; ++l)
            x = transformer_block(g, x, "speech.block" + std::to_string(l) + ".", cfg_.n_heads);
        return g.layer_norm(x, P(g, "speech.final_ln.g"), P(g, "speech.final_ln.b"));
    }

    // causal text logits [T x V_t]
    template <typename G>
    Var forward_text_branch(G& g, Var emb) const {
        return forward_text_top(g, forward_bottom(g, emb));
    }

    // top hidden states for the MTP head [T x d_model]
    template <typename G>
    Var forward_speech_branch(G& g, Var emb) const {
        return forward_speech_top(g, forward_bottom(g, emb));
    }

    // speech-head / MTP sub-head logits over a batch of group rows
    template <typename G>
    Var group_head_logits(G& g, Var hidden_rows, int sub, Var prev_emb_rows) const {
        if (sub == 0)
            return g.add_bias(g.matmul(hidden_rows, P(g, "speech.head.w")),
                              P(g, "speech.head.b"));
        const std::string base = "speech.mtp" + std::to_string(sub) + ".";
        return g.add_bias(g.matmul(g.concat_cols(hidden_rows, prev_emb_rows), P(g, base + "w")),
                          P(g, base + "b"));
    }

    // ---- persistence ----

    void save(const std::string& checkpoint_path, const std::string& config_path) const {
        save_checkpoint(params_, checkpoint_path);
        cfg_.to_kv().save(config_path);
    }

    static DualBranchModel load(const std::string& checkpoint_path,
                                const std::string& config_path) {
        ModelConfig cfg = ModelConfig::from_kv(KvConfig::load(config_path));
        return DualBranchModel(cfg, load_checkpoint(checkpoint_path));
    }

    static const std::vector<std::string>& block_part_names() {
        static const std::vector<std::string> names = {
            "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bq",
            "attn.bk", "attn.bv", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1",
            "mlp.w2", "mlp.b2"};
        return names;
    }

private:
    template <typename G>
    Var P(G& g, const std::string& name) const {
        return params_.leaf(g, name);
    }

    template <typename G>
    static int rows_of(G& g, Var v) {
        return g.value(v).rows();
    }

    static std::vector<int> iota(int n) {
        std::vector<int> out(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = i;
        return out;
    }

    // pre-LN block: x += attn(ln1(x)); x += mlp(ln2(x))
    template <typename G>
    Var transformer_block(G& g, Var x, const std::string& base, int heads) const {
        Var normed = g.layer_norm(x, P(g, base + "ln1.g"), P(g, base + "ln1.b"));
        Var attn = causal_attention(g, normed, base, heads);
        x = g.add(x, attn);
        Var normed2 = g.layer_norm(x, P(g, base + "ln2.g"), P(g, base + "ln2.b"));
        Var h = g.gelu(g.add_bias(g.matmul(normed2, P(g, base + "mlp.w1")), P(g, base + "mlp.b1")));
        Var out = g.add_bias(g.matmul(h, P(g, base + "mlp.w2")), P(g, base + "mlp.b2"));
        return g.add(x, out);
    }

    // causal multi-head self-attention with additive -1e9 masking
    template <typename G>
    Var causal_attention(G& g, Var x, const std::string& base, int heads) const {
        const int d = g.value(x).cols();
        const int dh = d / heads;
        Var q = g.add_bias(g.matmul(x, P(g, base + "attn.wq")), P(g, base + "attn.bq"));
        Var k = g.add_bias(g.matmul(x, P(g, base + "attn.wk")), P(g, base + "attn.bk"));
        Var v = g.add_bias(g.matmul(x, P(g, base + "attn.wv")), P(g, base + "attn.bv"));
        const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
        Var mixed;
        for (int h = 0; h < heads; ++h) {
            Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            Var scores = g.causal_mask(g.scale(g.matmul_nt(qh, kh), inv_sqrt));
            Var probs = g.softmax(scores, 1);
            Var head = g.matmul(probs, vh);
            mixed = h == 0 ? head : g.concat_cols(mixed, head);
        }
        return g.add_bias(g.matmul(mixed, P(g, base + "attn.wo")), P(g, base + "attn.bo"));
    }

    void add_block_params(Rng& rng, const std::string& base, int d) {
        const int hidden = d * cfg_.mlp_ratio;
        auto w = [&](std::vector<int> shape, float stddev) {
            return Tensor::randn(std::move(shape), rng, stddev);
        };
        params_.add(base + "ln1.g", Tensor::full({d}, 1.0f));
        params_.add(base + "ln1.b", Tensor({d}));
        params_.add(base + "attn.wq", w({d, d}, 0.02f));
        params_.add(base + "attn.wk", w({d, d}, 0.02f));
        params_.add(base + "attn.wv", w({d, d}, 0.02f));
        params_.add(base + "attn.wo", w({d, d}, 0.02f));
        params_.add(base + "attn.bq", Tensor({d}));
        params_.add(base + "attn.bk", Tensor({d}));
        params_.add(base + "attn.bv", Tensor({d}));
        params_.add(base + "attn.bo", Tensor({d}));
        params_.add(base + "ln2.g", Tensor::full({d}, 1.0f));
        params_.add(base + "ln2.b", Tensor({d}));
        params_.add(base + "mlp.w1", w({d, hidden}, 0.02f));
        params_.add(base + "mlp.b1", Tensor({hidden}));
        params_.add(base + "mlp.w2", w({hidden, d}, 0.02f));
        params_.add(base + "mlp.b2", Tensor({d}));
    }

    void init_params(uint64_t seed) {
        Rng rng(hash_combine(seed, 0x6d6f64656cull));
        const int d = cfg_.d_model;
        const int e = cfg_.enc_dim;
        auto he = [&](std::vector<int> shape, int fan_in) {
            return Tensor::randn(std::move(shape), rng, 1.0f / std::sqrt(static_cast<float>(fan_in)));
        };

        // encoder: 2 convs (second stride 2) + enc_layers transformer blocks
        params_.add("enc.conv1.w", he({3, cfg_.frame_dim, e}, 3 * cfg_.frame_dim));
        params_.add("enc.conv1.b", Tensor({e}));
        params_.add("enc.conv2.w", he({3, e, e}, 3 * e));
        params_.add("enc.conv2.b", Tensor({e}));
        params_.add("enc.pos", Tensor::randn({cfg_.context, e}, rng, 0.02f));
        for (int l = 0; l < cfg_.enc_layers; ++l)
            add_block_params(rng, "enc.block" + std::to_string(l) + ".", e);
        params_.add("enc.final_ln.g", Tensor::full({e}, 1.0f));
        params_.add("enc.final_ln.b", Tensor({e}));

        // projector: 3 convs (middle stride 2) + linear
        params_.add("proj.conv1.w", he({3, e, d}, 3 * e));
        params_.add("proj.conv1.b", Tensor({d}));
        params_.add("proj.conv2.w", he({3, d, d}, 3 * d));
        params_.add("proj.conv2.b", Tensor({d}));
        params_.add("proj.conv3.w", he({3, d, d}, 3 * d));
        params_.add("proj.conv3.b", Tensor({d}));
        params_.add("proj.lin.w", he({d, d}, d));
        params_.add("proj.lin.b", Tensor({d}));

        // shared trunk
        params_.add("lm.tok_emb", Tensor::randn({cfg_.text_vocab, d}, rng, 0.02f));
        params_.add("lm.pos_emb", Tensor::randn({cfg_.context, d}, rng, 0.02f));
        for (int l = 0; l < cfg_.frozen_layers; ++l)
            add_block_params(rng, "lm.block" + std::to_string(l) + ".", d);

        // text branch (the original top of the LLM)
        for (int l = cfg_.frozen_layers; l < cfg_.layers; ++l)
            add_block_params(rng, "text.block" + std::to_string(l) + ".", d);
        params_.add("text.final_ln.g", Tensor::full({d}, 1.0f));
        params_.add("text.final_ln.b", Tensor({d}));
        params_.add("text.head.w", Tensor::randn({d, cfg_.text_vocab}, rng, 0.02f));
        params_.add("text.head.b", Tensor({cfg_.text_vocab}));

        // speech branch: layer copies are overwritten by sync_speech_branch()
        for (int l = cfg_.frozen_layers; l < cfg_.layers; ++l)
            add_block_params(rng, "speech.block" + std::to_string(l) + ".", d);
        params_.add("speech.final_ln.g", Tensor::full({d}, 1.0f));
        params_.add("speech.final_ln.b", Tensor({d}));
        params_.add("speech.head.w", Tensor::randn({d, cfg_.speech_vocab}, rng, 0.02f));
        params_.add("speech.head.b", Tensor({cfg_.speech_vocab}));
        for (int i = 1; i < cfg_.group_size; ++i) {
            const std::string base = "speech.mtp" + std::to_string(i) + ".";
            params_.add(base + "w", Tensor::randn({2 * d, cfg_.speech_vocab}, rng, 0.02f));
            params_.add(base + "b", Tensor({cfg_.speech_vocab}));
        }
        params_.add("speech.tok_emb", Tensor::randn({cfg_.speech_vocab, d}, rng, 0.02f));
        params_.add("speech.start_emb", Tensor::randn({1, d}, rng, 0.02f));
    }

    ModelConfig cfg_;
    ParamStore params_;
};

// ---- training-sequence assembly ----

enum class AssembleMode { Alignment, Generation, TextOnly };

struct AssembledSequence {
    Var input;                    // [T x d_model] rows, before position add
    std::vector<Slot> slots;      // one entry per row
    // text-target modes (Alignment, TextOnly): next-token ids, -1 = ignored
    std::vector<int> text_targets;
    // generation mode: group rows and teacher-forced tokens
    std::vector<int> group_rows;
    std::vector<std::vector<int>> group_tokens;
    int speech_target_count = 0;  // == response length including EOS

    std::vector<int> loss_mask() const {
        std::vector<int> mask;
        if (!text_targets.empty()) {
            mask.reserve(text_targets.size());
            for (int t : text_targets) mask.push_back(t >= 0 ? 1 : 0);
        } else {
            for (const auto& grp : group_tokens)
                for (size_t i = 0; i < grp.size(); ++i) mask.push_back(1);
        }
        return mask;
    }
};

// Alignment mode: [prompt rows][descriptors][SEP][continuation...], loss on
// the continuation positions only.
template <typename G>
AssembledSequence assemble_alignment(const DualBranchModel& model, G& g,
                                     const AlignmentPair& pair) {
    const ModelConfig& cfg = model.config();
    AssembledSequence out;
    Var prompt = model.embed_prompt(g, pair.prompt_frames);
    const int prompt_rows = g.value(prompt).rows();

    std::vector<int> tokens = pair.descriptor_prefix;
    const int sep = cfg.text_vocab - 3;  // sep/eot/pad occupy the top three ids
    tokens.push_back(sep);
    const auto& cont = pair.continuation_text;
    tokens.insert(tokens.end(), cont.begin(), cont.end() - 1);

    const int total = prompt_rows + static_cast<int>(tokens.size());
    if (total > cfg.context)
        throw ContextOverflowError("assemble_alignment: sequence exceeds context");

    out.input = g.concat_rows({prompt, model.embed_text(g, tokens)});
    for (int i = 0; i < prompt_rows; ++i) out.slots.push_back({SlotKind::Query, i});
    for (size_t i = 0; i < tokens.size(); ++i)
        out.slots.push_back({SlotKind::Text, static_cast<int>(i)});

    out.text_targets.assign(static_cast<size_t>(total), -1);
    const int sep_pos = prompt_rows + static_cast<int>(pair.descriptor_prefix.size());
    for (size_t i = 0; i < cont.size(); ++i)
        out.text_targets[static_cast<size_t>(sep_pos) + i] = cont[i];
    return out;
}

// Text-only mode: plain next-token prediction over
// [descriptors][transcript][continuation]; used for LM pretraining and the
// perplexity probes.
template <typename G>
AssembledSequence assemble_text_only(const DualBranchModel& model, G& g,
                                     const std::vector<int>& tokens) {
    if (tokens.size() < 2) throw ArgumentError("assemble_text_only: need at least 2 tokens");
    const ModelConfig& cfg = model.config();
    if (static_cast<int>(tokens.size()) - 1 > cfg.context)
        throw ContextOverflowError("assemble_text_only: sequence exceeds context");
    AssembledSequence out;
    std::vector<int> input_tokens(tokens.begin(), tokens.end() - 1);
    out.input = model.embed_text(g, input_tokens);
    for (size_t i = 0; i < input_tokens.size(); ++i)
        out.slots.push_back({SlotKind::Text, static_cast<int>(i)});
    out.text_targets.assign(tokens.begin() + 1, tokens.end());
    return out;
}

// Generation mode: canonical interleaved layout; loss on speech-response
// token slots only. With use_text_query the query segment holds text-token
// embeddings and contains zero projected frames.
template <typename G>
AssembledSequence assemble_generation(const DualBranchModel& model, G& g, const Quadruple& item,
                                      bool use_text_query) {
    const ModelConfig& cfg = model.config();
    AssembledSequence out;

    Var query;
    if (use_text_query) {
        query = model.embed_text(g, item.text_query);
    } else {
        if (item.speech_query.empty())
            throw DataError("assemble_generation: item lacks a speech query");
        query = model.embed_prompt(g, item.speech_query);
    }
    const int query_rows = g.value(query).rows();

    const auto& resp = item.speech_response.ids;
    const int n_groups =
        static_cast<int>((resp.size() + cfg.group_size - 1) / cfg.group_size);
    out.slots = generation_layout(query_rows, static_cast<int>(item.text_response.size()),
                                  n_groups, cfg);
    if (static_cast<int>(out.slots.size()) > cfg.context)
        throw ContextOverflowError("assemble_generation: sequence exceeds context");

    for (int j = 0; j < n_groups; ++j) {
        std::vector<int> grp;
        for (int i = 0; i < cfg.group_size; ++i) {
            const size_t idx = static_cast<size_t>(j) * cfg.group_size + i;
            if (idx < resp.size()) grp.push_back(resp[idx]);
        }
        out.group_tokens.push_back(std::move(grp));
    }
    out.speech_target_count = static_cast<int>(resp.size());

    const int sep = cfg.text_vocab - 3;
    const int eot = cfg.text_vocab - 2;
    std::vector<Var> parts;
    parts.reserve(out.slots.size());
    for (const Slot& slot : out.slots) {
        switch (slot.kind) {
            case SlotKind::Query:
                if (slot.index == 0) parts.push_back(query);
                break;
            case SlotKind::Sep:
                parts.push_back(model.embed_text(g, {sep}));
                break;
            case SlotKind::Eot:
                parts.push_back(model.embed_text(g, {eot}));
                break;
            case SlotKind::Text:
                parts.push_back(
                    model.embed_text(g, {item.text_response[static_cast<size_t>(slot.index)]}));
                break;
            case SlotKind::Group: {
                out.group_rows.push_back(0);  // filled below once rows are final
                if (slot.index == 0) {
                    parts.push_back(model.params().leaf(g, "speech.start_emb"));
                } else {
                    Var prev = g.embedding(model.params().leaf(g, "speech.tok_emb"),
                                           out.group_tokens[static_cast<size_t>(slot.index) - 1]);
                    parts.push_back(g.mean_rows(prev));
                }
                break;
            }
        }
    }
    out.input = g.concat_rows(parts);

    int row = 0, gidx = 0;
    for (const Slot& slot : out.slots) {
        if (slot.kind == SlotKind::Group) out.group_rows[static_cast<size_t>(gidx++)] = row;
        row += 1;
    }
    return out;
}

// Cross-entropy on speech-response tokens via the speech head and MTP
// sub-heads, teacher forced, averaged over all non-ignored token slots.
template <typename G>
Var speech_generation_loss(const DualBranchModel& model, G& g, Var hidden,
                           const AssembledSequence& seq) {
    const ModelConfig& cfg = model.config();
    Var rows = g.gather_rows(hidden, seq.group_rows);
    const int n_groups = static_cast<int>(seq.group_tokens.size());
    Var total;
    for (int sub = 0; sub < cfg.group_size; ++sub) {
        std::vector<int> targets(static_cast<size_t>(n_groups), -1);
        std::vector<int> prev_ids(static_cast<size_t>(n_groups), 0);
        for (int j = 0; j < n_groups; ++j) {
            const auto& grp = seq.group_tokens[static_cast<size_t>(j)];
            if (sub < static_cast<int>(grp.size())) targets[static_cast<size_t>(j)] = grp[sub];
            if (sub > 0 && sub - 1 < static_cast<int>(grp.size()))
                prev_ids[static_cast<size_t>(j)] = grp[static_cast<size_t>(sub) - 1];
        }
        Var prev_emb;
        if (sub > 0)
            prev_emb = g.embedding(model.params().leaf(g, "speech.tok_emb"), prev_ids);
        Var logits = model.group_head_logits(g, rows, sub, prev_emb);
        Var part = g.cross_entropy(logits, targets, -1, Graph::Reduction::Sum);
        total = sub == 0 ? part : g.add(total, part);
    }
    return g.scale(total, 1.0f / static_cast<float>(std::max(1, seq.speech_target_count)));
}

}  // namespace goat
