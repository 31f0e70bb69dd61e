// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "goat/errors.hpp"
#include "goat/rng.hpp"

namespace goat {

// ---- configuration ----

struct ToyConfig {
    int alphabet = 32;       // phoneme-like token ids (A)
    int speakers = 16;       // S
    int dialects = 4;        // D
    int emotions = 3;        // E
    int frame_dim = 16;      // F
    int frame_rate = 2;      // frames per text token (R_f); layout needs >= 2
    int speech_vocab = 257;  // V_s, centroids + reserved EOS
    int max_text_len = 24;   // L_max
    int continuation_len = 8;  // C
    std::vector<double> dialect_weights;  // empty -> uniform
    std::vector<double> emotion_weights;  // empty -> uniform

    void validate() const {
        if (alphabet < 2 || speakers < 1 || dialects < 1 || emotions < 1)
            throw ArgumentError("ToyConfig: counts must be positive");
        if (frame_rate < 2)
            throw ArgumentError("ToyConfig: frame_rate must be >= 2 (content + identity frames)");
        if (max_text_len < 1 || continuation_len < 1)
            throw ArgumentError("ToyConfig: lengths must be positive");
        if (speech_vocab < 3) throw ArgumentError("ToyConfig: speech vocab too small");
        if (frame_dim < 2 * bits_for(alphabet) + 6)
            throw ArgumentError("ToyConfig: frame_dim too small for the template layout");
        if (frame_dim < 2 * bits_for(speakers) + 6)
            throw ArgumentError("ToyConfig: frame_dim too small for speaker codes");
        if (!dialect_weights.empty() && static_cast<int>(dialect_weights.size()) != dialects)
            throw ArgumentError("ToyConfig: dialect_weights size mismatch");
        if (!emotion_weights.empty() && static_cast<int>(emotion_weights.size()) != emotions)
            throw ArgumentError("ToyConfig: emotion_weights size mismatch");
    }

    static int bits_for(int n) {
        int b = 0;
        while ((1 << b) < n) ++b;
        return std::max(b, 1);
    }

    // payload block | 4-dim aux code | kind marker | spare
    int payload_dims() const { return frame_dim - 6; }
    int aux_offset() const { return frame_dim - 6; }
    int marker_dim() const { return frame_dim - 2; }

    int eos_id() const { return speech_vocab - 1; }

    // text vocabulary: phonemes, dialect descriptors, emotion descriptors,
    // separator, end-of-text, pad
    int desc_dialect(int d) const { return alphabet + d; }
    int desc_emotion(int e) const { return alphabet + dialects + e; }
    int sep_id() const { return alphabet + dialects + emotions; }
    int eot_id() const { return sep_id() + 1; }
    int pad_id() const { return sep_id() + 2; }
    int text_vocab() const { return alphabet + dialects + emotions + 3; }

    bool is_phoneme(int tok) const { return tok >= 0 && tok < alphabet; }
};

// ---- domain types ----

struct ToyUtterance {
    int64_t id = 0;
    std::vector<int> text;  // phoneme ids
    int speaker = 0;
    int dialect = 0;
    int emotion = 0;
};

struct SpeechFrames {
    int frame_dim = 0;
    int frame_rate = 0;
    std::vector<float> data;

    int rows() const { return frame_dim ? static_cast<int>(data.size()) / frame_dim : 0; }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * frame_dim; }
    float* row(int r) { return data.data() + static_cast<size_t>(r) * frame_dim; }
    bool empty() const { return data.empty(); }
};

struct SpeechTokens {
    std::vector<int> ids;  // terminated by exactly one EOS id

    int body_len() const { return static_cast<int>(ids.size()) - 1; }
};

struct AlignmentPair {
    int64_t id = 0;
    SpeechFrames prompt_frames;
    std::vector<int> descriptor_prefix;
    std::vector<int> continuation_text;
    // bookkeeping for data mixes and reconstruction
    std::vector<int> transcript;
    int speaker = 0;
    int dialect = 0;
    int emotion = 0;
    int strategy = 1;
};

struct Quadruple {
    int64_t id = 0;
    std::vector<int> text_query;
    SpeechFrames speech_query;
    std::vector<int> text_response;
    SpeechTokens speech_response;
    int speaker = 0;
    int dialect = 0;
    int emotion = 0;
};

// ---- bigram grammar ----
//
// Fixed toy grammar over the phoneme alphabet. Every token has up to four
// weighted successors; corpus text is sampled from it and the frozen toy LM
// continues greedily under it.

class ToyGrammar {
public:
    explicit ToyGrammar(int alphabet) : alphabet_(alphabet) {
        succ_.resize(alphabet);
        for (int a = 0; a < alphabet; ++a) {
            add(a, (a * 5 + 1) % alphabet, 0.4);
            add(a, (a * 3 + 2) % alphabet, 0.3);
            add(a, (a * 7 + 5) % alphabet, 0.2);
            add(a, (a + 11) % alphabet, 0.1);
        }
    }

    const std::vector<std::pair<int, double>>& successors(int a) const {
        if (a < 0 || a >= alphabet_) throw ArgumentError("ToyGrammar: token out of range");
        return succ_[a];
    }

    // highest-weight successor, ties broken by lowest token id
    int greedy_next(int a) const {
        int best = -1;
        double best_w = -1.0;
        for (const auto& [tok, w] : successors(a)) {
            if (w > best_w || (w == best_w && tok < best)) {
                best = tok;
                best_w = w;
            }
        }
        return best;
    }

    int sample_next(int a, Rng& rng) const {
        const auto& s = successors(a);
        std::vector<double> w(s.size());
        for (size_t i = 0; i < s.size(); ++i) w[i] = s[i].second;
        return s[static_cast<size_t>(rng.weighted(w))].first;
    }

    double weight(int a, int b) const {
        for (const auto& [tok, w] : successors(a))
            if (tok == b) return w;
        return 0.0;
    }

private:
    void add(int a, int b, double w) {
        for (auto& [tok, weight] : succ_[a]) {
            if (tok == b) {
                weight += w;
                return;
            }
        }
        succ_[a].push_back({b, w});
        std::sort(succ_[a].begin(), succ_[a].end());
    }

    int alphabet_;
    std::vector<std::vector<std::pair<int, double>>> succ_;
};

// Frozen toy LM: greedy continuation under the grammar, seeded by the last
// phoneme of the prefix. Descriptor tokens are legal prefix content.
inline std::vector<int> toy_lm_continue(const std::vector<int>& prefix, const ToyConfig& cfg) {
    if (prefix.empty()) throw ArgumentError("toy_lm_continue: empty prefix");
    const ToyGrammar grammar(cfg.alphabet);
    int state = -1;
    for (int tok : prefix)
        if (cfg.is_phoneme(tok)) state = tok;
    if (state < 0) {
        int64_t sum = 0;
        for (int tok : prefix) sum += tok;
        state = static_cast<int>(sum % cfg.alphabet);
    }
    std::vector<int> out;
    out.reserve(static_cast<size_t>(cfg.continuation_len));
    for (int i = 0; i < cfg.continuation_len; ++i) {
        state = grammar.greedy_next(state);
        out.push_back(state);
    }
    return out;
}

// ---- corpus generation ----

inline std::vector<ToyUtterance> gen_corpus(uint64_t seed, const ToyConfig& cfg, int count) {
    cfg.validate();
    if (count < 0) throw ArgumentError("gen_corpus: count must be nonnegative");
    const ToyGrammar grammar(cfg.alphabet);
    Rng rng(hash_combine(seed, 0x636f7270ull));
    std::vector<double> dw = cfg.dialect_weights;
    if (dw.empty()) dw.assign(static_cast<size_t>(cfg.dialects), 1.0);
    std::vector<double> ew = cfg.emotion_weights;
    if (ew.empty()) ew.assign(static_cast<size_t>(cfg.emotions), 1.0);

    std::vector<ToyUtterance> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        ToyUtterance u;
        u.id = i;
        u.speaker = rng.uniform_int(cfg.speakers);
        u.dialect = rng.weighted(dw);
        u.emotion = rng.weighted(ew);
        const int len = 1 + rng.uniform_int(cfg.max_text_len);
        u.text.reserve(static_cast<size_t>(len));
        u.text.push_back(rng.uniform_int(cfg.alphabet));
        for (int t = 1; t < len; ++t) u.text.push_back(grammar.sample_next(u.text.back(), rng));
        out.push_back(std::move(u));
    }
    return out;
}

// ---- frame templates ----
//
// Deterministic code vectors, versioned together with the codebook. Each text
// token renders to frame_rate frames: even sub-frames carry the dialect-mixed
// phoneme code plus a dialect code, odd sub-frames carry the emotion-scaled
// speaker code plus an emotion code. A kind-marker dim keeps the two
// populations far apart. Inversion is exact as long as the margin between
// template centers stays above twice the codec quantization radius.

class FrameTemplates {
public:
    static constexpr int kVersion = 1;
    static constexpr float kCodeScale = 1.0f;    // alpha/beta
    static constexpr float kMarker = 1.5f;       // content +, identity -
    static constexpr float kJitter = 0.02f;      // per-dim amplitude
    static constexpr float kClamp = 4.0f;

    explicit FrameTemplates(const ToyConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        build_codes();
        build_candidates();
    }

    const ToyConfig& config() const { return cfg_; }

    // clean (jitter-free) frame for a content sub-frame
    const std::vector<float>& content_point(int a, int d) const {
        return content_points_[static_cast<size_t>(a) * cfg_.dialects + d];
    }
    // clean frame for an identity sub-frame
    const std::vector<float>& identity_point(int s, int e) const {
        return identity_points_[static_cast<size_t>(s) * cfg_.emotions + e];
    }

    int content_count() const { return static_cast<int>(content_points_.size()); }
    int identity_count() const { return static_cast<int>(identity_points_.size()); }

    float emotion_gain(int e) const {
        static constexpr float gains[] = {0.8f, 1.0f, 1.25f};
        if (e < 3) return gains[e];
        return 0.7f + 0.17f * static_cast<float>(e);  // extend monotonically
    }

    // min pairwise distance over all distinct template centers
    float min_margin() const { return min_margin_; }
    float content_margin() const { return content_margin_; }
    float identity_margin() const { return identity_margin_; }
    // nearest-candidate decision threshold for the oracle
    float decision_radius() const { return min_margin_ * 0.5f; }
    // upper bound on the jitter norm of any rendered frame
    float jitter_norm_bound() const {
        return kJitter * std::sqrt(static_cast<float>(cfg_.frame_dim));
    }

    // decode a frame against the content set; returns (a, d, distance)
    struct Match {
        int first = -1;
        int second = -1;
        float dist = 0.0f;
    };

    Match nearest_content(const float* frame) const {
        return nearest(frame, content_points_, cfg_.dialects);
    }
    Match nearest_identity(const float* frame) const {
        return nearest(frame, identity_points_, cfg_.emotions);
    }

private:
    static float sq_dist(const float* a, const float* b, int n) {
        float acc = 0.0f;
        for (int i = 0; i < n; ++i) {
            const float d = a[i] - b[i];
            acc += d * d;
        }
        return acc;
    }

    Match nearest(const float* frame, const std::vector<std::vector<float>>& points,
                  int inner) const {
        Match m;
        float best = std::numeric_limits<float>::max();
        for (size_t i = 0; i < points.size(); ++i) {
            const float d = sq_dist(frame, points[i].data(), cfg_.frame_dim);
            if (d < best) {
                best = d;
                m.first = static_cast<int>(i) / inner;
                m.second = static_cast<int>(i) % inner;
            }
        }
        m.dist = std::sqrt(best);
        return m;
    }

    static float sign_bit(uint64_t h) { return (h & 1ull) ? kCodeScale : -kCodeScale; }

    static uint64_t code_hash(char tag, int idx, int dim) {
        uint64_t h = hash_combine(0x746d706cull + kVersion, static_cast<uint64_t>(tag));
        h = hash_combine(h, static_cast<uint64_t>(idx));
        return hash_combine(h, static_cast<uint64_t>(dim));
    }

    // binary code + coprime-permuted binary code: any two distinct indices
    // differ in at least two dims, so the margin is >= 2*sqrt(2)*scale
    static std::vector<float> doubled_bit_code(int idx, int n, int dims, char tag) {
        const int bits = ToyConfig::bits_for(n);
        int mult = 3;
        while (std::gcd(mult, n) != 1) mult += 2;
        const int perm = static_cast<int>((static_cast<int64_t>(idx) * mult + 1) % n);
        std::vector<float> code(static_cast<size_t>(dims), 0.0f);
        for (int b = 0; b < bits && b < dims; ++b)
            code[b] = (idx >> b) & 1 ? kCodeScale : -kCodeScale;
        for (int b = 0; b < bits && bits + b < dims; ++b)
            code[bits + b] = (perm >> b) & 1 ? kCodeScale : -kCodeScale;
        for (int i = 2 * bits; i < dims; ++i) code[i] = sign_bit(code_hash(tag, idx, i));
        return code;
    }

    void build_codes() {
        const int fp = cfg_.payload_dims();
        phoneme_codes_.resize(static_cast<size_t>(cfg_.alphabet));
        for (int a = 0; a < cfg_.alphabet; ++a)
            phoneme_codes_[a] = doubled_bit_code(a, cfg_.alphabet, fp, 'P');
        speaker_codes_.resize(static_cast<size_t>(cfg_.speakers));
        for (int s = 0; s < cfg_.speakers; ++s)
            speaker_codes_[s] = doubled_bit_code(s, cfg_.speakers, fp, 'S');

        // 4-dim aux codes from the order-4 Hadamard rows; hash codes beyond
        auto aux_code = [&](int idx, char tag) {
            static constexpr float h4[4][4] = {{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1},
                                               {1, -1, -1, 1}};
            std::vector<float> code(4, 0.0f);
            if (idx < 4) {
                for (int i = 0; i < 4; ++i) code[i] = h4[idx][i] * kCodeScale;
            } else {
                for (int i = 0; i < 4; ++i) code[i] = sign_bit(code_hash(tag, idx, i));
            }
            return code;
        };
        dialect_codes_.resize(static_cast<size_t>(cfg_.dialects));
        for (int d = 0; d < cfg_.dialects; ++d) dialect_codes_[d] = aux_code(d, 'D');
        emotion_codes_.resize(static_cast<size_t>(cfg_.emotions));
        for (int e = 0; e < cfg_.emotions; ++e) emotion_codes_[e] = aux_code(e, 'E');
    }

    // signed rotation of the payload block; exactly orthogonal, identity for
    // dialect 0
    std::vector<float> dialect_mix(const std::vector<float>& payload, int d) const {
        const int fp = cfg_.payload_dims();
        if (d == 0) return payload;
        std::vector<float> out(static_cast<size_t>(fp));
        const int rot = (d * 3) % fp;
        for (int i = 0; i < fp; ++i) {
            const float sign = sign_bit(code_hash('Q', d, i)) / kCodeScale;
            out[i] = sign * payload[(i + rot) % fp];
        }
        return out;
    }

    void build_candidates() {
        const int F = cfg_.frame_dim;
        const int fp = cfg_.payload_dims();
        const int aux = cfg_.aux_offset();
        const int mk = cfg_.marker_dim();

        content_points_.reserve(static_cast<size_t>(cfg_.alphabet) * cfg_.dialects);
        for (int a = 0; a < cfg_.alphabet; ++a) {
            for (int d = 0; d < cfg_.dialects; ++d) {
                std::vector<float> frame(static_cast<size_t>(F), 0.0f);
                const auto mixed = dialect_mix(phoneme_codes_[a], d);
                for (int i = 0; i < fp; ++i) frame[i] = mixed[i];
                for (int i = 0; i < 4; ++i) frame[aux + i] = dialect_codes_[d][i];
                frame[mk] = kMarker;
                content_points_.push_back(std::move(frame));
            }
        }
        identity_points_.reserve(static_cast<size_t>(cfg_.speakers) * cfg_.emotions);
        for (int s = 0; s < cfg_.speakers; ++s) {
            for (int e = 0; e < cfg_.emotions; ++e) {
                std::vector<float> frame(static_cast<size_t>(F), 0.0f);
                const float g = emotion_gain(e);
                for (int i = 0; i < fp; ++i) frame[i] = g * speaker_codes_[s][i];
                for (int i = 0; i < 4; ++i) frame[aux + i] = emotion_codes_[e][i];
                frame[mk] = -kMarker;
                identity_points_.push_back(std::move(frame));
            }
        }

        auto min_dist = [&](const std::vector<std::vector<float>>& pts) {
            float best = std::numeric_limits<float>::max();
            for (size_t i = 0; i < pts.size(); ++i)
                for (size_t j = i + 1; j < pts.size(); ++j)
                    best = std::min(best, sq_dist(pts[i].data(), pts[j].data(), F));
            return std::sqrt(best);
        };
        content_margin_ = min_dist(content_points_);
        identity_margin_ = min_dist(identity_points_);
        float cross = std::numeric_limits<float>::max();
        for (const auto& c : content_points_)
            for (const auto& i : identity_points_)
                cross = std::min(cross, sq_dist(c.data(), i.data(), F));
        min_margin_ = std::min({content_margin_, identity_margin_, std::sqrt(cross)});
    }

    ToyConfig cfg_;
    std::vector<std::vector<float>> phoneme_codes_;
    std::vector<std::vector<float>> speaker_codes_;
    std::vector<std::vector<float>> dialect_codes_;
    std::vector<std::vector<float>> emotion_codes_;
    std::vector<std::vector<float>> content_points_;
    std::vector<std::vector<float>> identity_points_;
    float min_margin_ = 0.0f;
    float content_margin_ = 0.0f;
    float identity_margin_ = 0.0f;
};

// ---- rendering ----

inline uint64_t utterance_hash(const ToyUtterance& u) {
    uint64_t h = hash_combine(0x75747465ull, static_cast<uint64_t>(u.speaker));
    h = hash_combine(h, static_cast<uint64_t>(u.dialect));
    h = hash_combine(h, static_cast<uint64_t>(u.emotion));
    for (int t : u.text) h = hash_combine(h, static_cast<uint64_t>(t));
    return h;
}

// Deterministic text -> frames synthesis. Plays the TTS role: same utterance,
// same frames, down to the hash-derived jitter.
inline SpeechFrames render_speech(const ToyUtterance& u, const FrameTemplates& tpl) {
    const ToyConfig& cfg = tpl.config();
    if (u.text.empty() || static_cast<int>(u.text.size()) > cfg.max_text_len)
        throw ArgumentError("render_speech: text length out of range");
    if (u.speaker < 0 || u.speaker >= cfg.speakers || u.dialect < 0 ||
        u.dialect >= cfg.dialects || u.emotion < 0 || u.emotion >= cfg.emotions)
        throw ArgumentError("render_speech: descriptor id out of range");
    for (int t : u.text)
        if (!cfg.is_phoneme(t)) throw ArgumentError("render_speech: non-phoneme token in text");

    const uint64_t uh = utterance_hash(u);
    SpeechFrames frames;
    frames.frame_dim = cfg.frame_dim;
    frames.frame_rate = cfg.frame_rate;
    frames.data.reserve(u.text.size() * cfg.frame_rate * cfg.frame_dim);
    for (size_t t = 0; t < u.text.size(); ++t) {
        for (int j = 0; j < cfg.frame_rate; ++j) {
            const std::vector<float>& base = (j % 2 == 0)
                                                 ? tpl.content_point(u.text[t], u.dialect)
                                                 : tpl.identity_point(u.speaker, u.emotion);
            const uint64_t ph = hash_combine(uh, static_cast<uint64_t>(t * 131 + j));
            for (int i = 0; i < cfg.frame_dim; ++i) {
                const uint64_t bits = mix_u64(hash_combine(ph, static_cast<uint64_t>(i)));
                const float unit =
                    static_cast<float>(static_cast<double>(bits >> 11) * 0x1.0p-53) * 2.0f - 1.0f;
                float v = base[i] + FrameTemplates::kJitter * unit;
                v = std::clamp(v, -FrameTemplates::kClamp, FrameTemplates::kClamp);
                frames.data.push_back(v);
            }
        }
    }
    return frames;
}

// ---- oracle transcription ----

struct OracleResult {
    std::vector<int> text;  // -1 marks a failed frame group
    int speaker = -1;
    int dialect = -1;
    int emotion = -1;
    int failed_groups = 0;

    bool exact() const { return failed_groups == 0; }
};

// Exact analytic inversion of render_speech. Works on raw frames as long as
// every frame stays within the decision radius of its template center, which
// the margin property guarantees after a codec round trip.
inline OracleResult oracle_transcribe(const SpeechFrames& frames, const FrameTemplates& tpl) {
    const ToyConfig& cfg = tpl.config();
    OracleResult res;
    if (frames.empty()) {
        res.speaker = res.dialect = res.emotion = 0;
        return res;
    }
    if (frames.frame_dim != cfg.frame_dim)
        throw ArgumentError("oracle_transcribe: frame dimension mismatch");
    const int rf = cfg.frame_rate;
    const int groups = frames.rows() / rf;
    const float radius = tpl.decision_radius();

    std::vector<int> spk_votes(static_cast<size_t>(cfg.speakers), 0);
    std::vector<int> dia_votes(static_cast<size_t>(cfg.dialects), 0);
    std::vector<int> emo_votes(static_cast<size_t>(cfg.emotions), 0);

    for (int gidx = 0; gidx < groups; ++gidx) {
        int tok = -1;
        bool ok = true;
        for (int j = 0; j < rf; ++j) {
            const float* f = frames.row(gidx * rf + j);
            if (j % 2 == 0) {
                const auto m = tpl.nearest_content(f);
                if (m.dist > radius) {
                    ok = false;
                    continue;
                }
                if (tok < 0) tok = m.first;
                dia_votes[static_cast<size_t>(m.second)] += 1;
            } else {
                const auto m = tpl.nearest_identity(f);
                if (m.dist > radius) {
                    ok = false;
                    continue;
                }
                spk_votes[static_cast<size_t>(m.first)] += 1;
                emo_votes[static_cast<size_t>(m.second)] += 1;
            }
        }
        if (!ok || tok < 0) {
            res.text.push_back(-1);
            res.failed_groups += 1;
        } else {
            res.text.push_back(tok);
        }
    }

    auto majority = [](const std::vector<int>& votes) {
        int best = 0;
        for (size_t i = 1; i < votes.size(); ++i)
            if (votes[i] > votes[best]) best = static_cast<int>(i);
        return best;
    };
    res.speaker = majority(spk_votes);
    res.dialect = majority(dia_votes);
    res.emotion = majority(emo_votes);
    return res;
}

// ---- descriptor helpers ----

inline std::vector<int> descriptor_prefix_for(const ToyUtterance& u, const ToyConfig& cfg) {
    return {cfg.desc_dialect(u.dialect), cfg.desc_emotion(u.emotion)};
}

// ---- continuation-pair and quadruple builders ----

enum class PairStrategy {
    TranscriptContinuation = 1,  // extend an existing (audio, transcript) pair
    TtsRendered = 2,             // synthesize a coherent sentence, then extend it
};

inline std::vector<AlignmentPair> build_alignment_pairs(const std::vector<ToyUtterance>& corpus,
                                                        PairStrategy strategy,
                                                        const FrameTemplates& tpl) {
    if (corpus.empty()) throw ArgumentError("build_alignment_pairs: empty corpus");
    const ToyConfig& cfg = tpl.config();
    const ToyGrammar grammar(cfg.alphabet);
    std::vector<AlignmentPair> out;
    out.reserve(corpus.size());
    for (const auto& u : corpus) {
        ToyUtterance src = u;
        if (strategy == PairStrategy::TtsRendered) {
            // deterministic coherent sentence: greedy rollout matching length
            std::vector<int> sentence;
            sentence.reserve(u.text.size());
            sentence.push_back(u.text[0]);
            while (sentence.size() < u.text.size())
                sentence.push_back(grammar.greedy_next(sentence.back()));
            src.text = std::move(sentence);
        }
        AlignmentPair pair;
        pair.id = u.id;
        pair.strategy = static_cast<int>(strategy);
        pair.speaker = src.speaker;
        pair.dialect = src.dialect;
        pair.emotion = src.emotion;
        pair.transcript = src.text;
        pair.descriptor_prefix = descriptor_prefix_for(src, cfg);
        pair.prompt_frames = render_speech(src, tpl);
        std::vector<int> lm_input = pair.descriptor_prefix;
        lm_input.insert(lm_input.end(), src.text.begin(), src.text.end());
        pair.continuation_text = toy_lm_continue(lm_input, cfg);
        out.push_back(std::move(pair));
    }
    return out;
}

struct QuadrupleBuild {
    std::vector<Quadruple> quadruples;
    int skipped_utterances = 0;
};

// Pairs consecutive utterances with identical (speaker, dialect, emotion) so
// query and response keep consistent conversational characteristics.
template <typename EncodeFn>
QuadrupleBuild build_quadruples(const std::vector<ToyUtterance>& corpus,
                                const FrameTemplates& tpl, EncodeFn&& codec_encode) {
    QuadrupleBuild out;
    std::map<std::tuple<int, int, int>, const ToyUtterance*> pending;
    int64_t next_id = 0;
    for (const auto& u : corpus) {
        const auto key = std::make_tuple(u.speaker, u.dialect, u.emotion);
        auto it = pending.find(key);
        if (it == pending.end()) {
            pending[key] = &u;
            continue;
        }
        const ToyUtterance* query = it->second;
        pending.erase(it);
        Quadruple q;
        q.id = next_id++;
        q.text_query = query->text;
        q.speech_query = render_speech(*query, tpl);
        q.text_response = u.text;
        q.speech_response = codec_encode(render_speech(u, tpl));
        q.speaker = u.speaker;
        q.dialect = u.dialect;
        q.emotion = u.emotion;
        out.quadruples.push_back(std::move(q));
    }
    out.skipped_utterances = static_cast<int>(pending.size());
    return out;
}

// 90/10 split by seeded hash of the utterance/record id; leak-free across runs
inline bool is_held_out(int64_t id, uint64_t split_seed) {
    return mix_u64(hash_combine(split_seed, static_cast<uint64_t>(id))) % 10 == 0;
}

}  // namespace goat
