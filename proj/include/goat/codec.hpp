// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "goat/errors.hpp"
#include "goat/io.hpp"
#include "goat/kernels.hpp"
#include "goat/rng.hpp"
#include "goat/toy_world.hpp"

namespace goat {

// Discrete speech codec: per-frame nearest-centroid quantization against a
// frozen codebook, EOS appended. The codebook is computed once by the
// `codebook` CLI command (k-means over rendered corpus frames) and shipped as
// a versioned asset; nothing at runtime ever refits it.
class Codec {
public:
    Codec(std::vector<float> centroids, int frame_dim, int speech_vocab)
        : centroids_(std::move(centroids)), frame_dim_(frame_dim), vocab_(speech_vocab) {
        if (frame_dim_ <= 0 || vocab_ < 2)
            throw ArgumentError("Codec: bad dimensions");
        if (centroids_.size() != static_cast<size_t>(vocab_ - 1) * frame_dim_)
            throw ArgumentError("Codec: centroid matrix does not match vocab/frame_dim");
    }

    int frame_dim() const { return frame_dim_; }
    int vocab() const { return vocab_; }
    int eos_id() const { return vocab_ - 1; }
    int centroid_count() const { return vocab_ - 1; }

    const float* centroid(int id) const {
        return centroids_.data() + static_cast<size_t>(id) * frame_dim_;
    }

    // nearest centroid; ties broken by lowest centroid id
    int quantize(const float* frame) const {
        int best = 0;
        float best_d = kernels::sq_dist(frame, centroid(0), frame_dim_);
        for (int c = 1; c < centroid_count(); ++c) {
            const float d = kernels::sq_dist(frame, centroid(c), frame_dim_);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        return best;
    }

    SpeechTokens encode(const SpeechFrames& frames) const {
        if (!frames.empty() && frames.frame_dim != frame_dim_)
            throw ArgumentError("Codec: frame dimension mismatch");
        SpeechTokens out;
        out.ids.reserve(static_cast<size_t>(frames.rows()) + 1);
        for (int r = 0; r < frames.rows(); ++r) out.ids.push_back(quantize(frames.row(r)));
        out.ids.push_back(eos_id());
        return out;
    }

    SpeechFrames decode(const SpeechTokens& tokens, int frame_rate = 2) const {
        validate_tokens(tokens);
        SpeechFrames out;
        out.frame_dim = frame_dim_;
        out.frame_rate = frame_rate;
        out.data.reserve(static_cast<size_t>(tokens.body_len()) * frame_dim_);
        for (int i = 0; i < tokens.body_len(); ++i) {
            const float* c = centroid(tokens.ids[static_cast<size_t>(i)]);
            out.data.insert(out.data.end(), c, c + frame_dim_);
        }
        return out;
    }

    void validate_tokens(const SpeechTokens& tokens) const {
        if (tokens.ids.empty() || tokens.ids.back() != eos_id())
            throw DataError("Codec: token sequence must end with EOS");
        for (int i = 0; i < tokens.body_len(); ++i) {
            const int id = tokens.ids[static_cast<size_t>(i)];
            if (id < 0 || id >= centroid_count())
                throw DataError("Codec: unknown token id " + std::to_string(id));
        }
    }

    // max distance from any of the given frames to its centroid
    float quantization_radius(const SpeechFrames& frames) const {
        float worst = 0.0f;
        for (int r = 0; r < frames.rows(); ++r) {
            const float d = kernels::sq_dist(frames.row(r), centroid(quantize(frames.row(r))),
                                             frame_dim_);
            worst = std::max(worst, d);
        }
        return std::sqrt(worst);
    }

    void save(const std::string& path) const {
        write_frame_matrix(path, centroid_count(), frame_dim_, centroids_);
    }

    static Codec load(const std::string& path, int speech_vocab) {
        FrameMatrix m = read_frame_matrix(path);
        if (m.rows != speech_vocab - 1)
            throw DataError("Codec: codebook has " + std::to_string(m.rows) +
                            " centroids, expected " + std::to_string(speech_vocab - 1));
        return Codec(std::move(m.data), m.cols, speech_vocab);
    }

private:
    std::vector<float> centroids_;
    int frame_dim_;
    int vocab_;
};

// ---- codebook construction (repo script path, not a runtime dependency) ----

// Lloyd k-means with deterministic seeding. Empty or duplicate centroids are
// replaced by distinct far-shell sentinels so encode(decode(t)) == t holds
// for every valid token id.
inline Codec build_codebook(const std::vector<SpeechFrames>& corpus_frames, int frame_dim,
                            int speech_vocab, uint64_t seed, int iters = 25) {
    const int k = speech_vocab - 1;
    std::vector<const float*> frames;
    for (const auto& f : corpus_frames)
        for (int r = 0; r < f.rows(); ++r) frames.push_back(f.row(r));
    if (frames.empty()) throw ArgumentError("build_codebook: no frames");

    // farthest-point (max-min) seeding: deterministic, and with k at or above
    // the number of natural clusters every cluster receives a centroid
    Rng rng(hash_combine(seed, 0x6b6d656173ull));
    std::vector<float> centroids(static_cast<size_t>(k) * frame_dim);
    std::vector<float> min_d(frames.size(), std::numeric_limits<float>::max());
    size_t first = static_cast<size_t>(rng.uniform_int(static_cast<int>(frames.size())));
    kernels::copy(centroids.data(), frames[first], frame_dim);
    for (int c = 1; c < k; ++c) {
        const float* prev = centroids.data() + static_cast<size_t>(c - 1) * frame_dim;
        size_t far_idx = 0;
        float far_d = -1.0f;
        for (size_t i = 0; i < frames.size(); ++i) {
            min_d[i] = std::min(min_d[i], kernels::sq_dist(frames[i], prev, frame_dim));
            if (min_d[i] > far_d) {
                far_d = min_d[i];
                far_idx = i;
            }
        }
        kernels::copy(centroids.data() + static_cast<size_t>(c) * frame_dim, frames[far_idx],
                      frame_dim);
    }

    std::vector<int> assign(frames.size(), 0);
    std::vector<float> sums(static_cast<size_t>(k) * frame_dim);
    std::vector<int> counts(static_cast<size_t>(k));
    for (int it = 0; it < iters; ++it) {
        bool moved = false;
        for (size_t i = 0; i < frames.size(); ++i) {
            int best = 0;
            float best_d = kernels::sq_dist(frames[i], centroids.data(), frame_dim);
            for (int c = 1; c < k; ++c) {
                const float d = kernels::sq_dist(
                    frames[i], centroids.data() + static_cast<size_t>(c) * frame_dim, frame_dim);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[i] != best) moved = true;
            assign[i] = best;
        }
        std::fill(sums.begin(), sums.end(), 0.0f);
        std::fill(counts.begin(), counts.end(), 0);
        for (size_t i = 0; i < frames.size(); ++i) {
            kernels::add(sums.data() + static_cast<size_t>(assign[i]) * frame_dim, frames[i],
                         frame_dim);
            counts[static_cast<size_t>(assign[i])] += 1;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) continue;
            const float inv = 1.0f / static_cast<float>(counts[static_cast<size_t>(c)]);
            for (int i = 0; i < frame_dim; ++i)
                centroids[static_cast<size_t>(c) * frame_dim + i] =
                    sums[static_cast<size_t>(c) * frame_dim + i] * inv;
        }
        if (!moved && it > 0) break;
    }

    // replace empties/duplicates with distinct sentinels far from the data
    std::fill(counts.begin(), counts.end(), 0);
    for (size_t i = 0; i < frames.size(); ++i) counts[static_cast<size_t>(assign[i])] += 1;
    int sentinel = 0;
    for (int c = 0; c < k; ++c) {
        bool dup = false;
        for (int p = 0; p < c && !dup; ++p)
            dup = kernels::sq_dist(centroids.data() + static_cast<size_t>(c) * frame_dim,
                                   centroids.data() + static_cast<size_t>(p) * frame_dim,
                                   frame_dim) == 0.0f;
        if (counts[static_cast<size_t>(c)] > 0 && !dup) continue;
        float* row = centroids.data() + static_cast<size_t>(c) * frame_dim;
        kernels::fill(row, 3.75f, frame_dim);
        row[0] = 3.0f + 0.001f * static_cast<float>(sentinel % 1000);
        row[1 % frame_dim] = 3.0f + 0.001f * static_cast<float>(sentinel / 1000);
        ++sentinel;
    }
    return Codec(std::move(centroids), frame_dim, speech_vocab);
}

// ---- margin property ----

struct MarginReport {
    float template_margin = 0.0f;     // min distance between distinct template centers
    float quantization_radius = 0.0f; // conservative bound (or measured when frames given)
    bool ok = false;
};

// Startup check against the shipped codebook: template margin must exceed
// twice the quantization radius. The radius bound covers any rendered frame:
// distance(point, nearest centroid) + max jitter norm.
inline MarginReport check_margins(const FrameTemplates& tpl, const Codec& codec) {
    MarginReport rep;
    rep.template_margin = tpl.min_margin();
    const ToyConfig& cfg = tpl.config();
    float worst = 0.0f;
    auto probe = [&](const std::vector<float>& point) {
        const float d = kernels::sq_dist(point.data(), codec.centroid(codec.quantize(point.data())),
                                         cfg.frame_dim);
        worst = std::max(worst, d);
    };
    for (int a = 0; a < cfg.alphabet; ++a)
        for (int d = 0; d < cfg.dialects; ++d) probe(tpl.content_point(a, d));
    for (int s = 0; s < cfg.speakers; ++s)
        for (int e = 0; e < cfg.emotions; ++e) probe(tpl.identity_point(s, e));
    rep.quantization_radius = std::sqrt(worst) + tpl.jitter_norm_bound();
    rep.ok = rep.template_margin > 2.0f * rep.quantization_radius;
    return rep;
}

inline MarginReport check_margins_measured(const FrameTemplates& tpl, const Codec& codec,
                                           const std::vector<SpeechFrames>& corpus_frames) {
    MarginReport rep;
    rep.template_margin = tpl.min_margin();
    float worst = 0.0f;
    for (const auto& f : corpus_frames) worst = std::max(worst, codec.quantization_radius(f));
    rep.quantization_radius = worst;
    rep.ok = rep.template_margin > 2.0f * rep.quantization_radius;
    return rep;
}

}  // namespace goat
