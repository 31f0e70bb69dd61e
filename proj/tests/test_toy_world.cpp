// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "goat/codec.hpp"
#include "goat/toy_world.hpp"

using namespace goat;

namespace {

ToyConfig default_cfg() { return ToyConfig{}; }

const FrameTemplates& templates() {
    static FrameTemplates tpl(default_cfg());
    return tpl;
}

std::vector<ToyUtterance> small_corpus(uint64_t seed = 0, int count = 64) {
    return gen_corpus(seed, default_cfg(), count);
}

const Codec& test_codec() {
    static Codec codec = [] {
        auto corpus = small_corpus(0, 200);
        std::vector<SpeechFrames> frames;
        frames.reserve(corpus.size());
        for (const auto& u : corpus) frames.push_back(render_speech(u, templates()));
        return build_codebook(frames, default_cfg().frame_dim, default_cfg().speech_vocab, 1);
    }();
    return codec;
}

}  // namespace

TEST_CASE("corpus generation") {
    const auto cfg = default_cfg();
    SECTION("fixed seed gives exactly the requested count, bitwise reproducible") {
        auto a = gen_corpus(7, cfg, 10);
        auto b = gen_corpus(7, cfg, 10);
        REQUIRE(a.size() == 10);
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].text == b[i].text);
            CHECK(a[i].speaker == b[i].speaker);
            CHECK(a[i].dialect == b[i].dialect);
            CHECK(a[i].emotion == b[i].emotion);
        }
    }
    SECTION("uniform weights give dialect frequencies within 3% of 1/D") {
        auto corpus = gen_corpus(3, cfg, 10000);
        std::vector<int> counts(static_cast<size_t>(cfg.dialects), 0);
        for (const auto& u : corpus) counts[static_cast<size_t>(u.dialect)] += 1;
        for (int d = 0; d < cfg.dialects; ++d) {
            const double freq = counts[static_cast<size_t>(d)] / 10000.0;
            CHECK(std::fabs(freq - 1.0 / cfg.dialects) < 0.03);
        }
    }
    SECTION("max_text_len 1 bounds every text to one token") {
        ToyConfig c = cfg;
        c.max_text_len = 1;
        for (const auto& u : gen_corpus(5, c, 50)) CHECK(u.text.size() == 1);
    }
    SECTION("texts follow the bigram grammar") {
        const ToyGrammar grammar(cfg.alphabet);
        for (const auto& u : small_corpus(11)) {
            for (size_t i = 1; i < u.text.size(); ++i)
                CHECK(grammar.weight(u.text[i - 1], u.text[i]) > 0.0);
        }
    }
}

TEST_CASE("speech rendering") {
    const auto& tpl = templates();
    SECTION("same utterance renders identically") {
        auto corpus = small_corpus(1, 4);
        for (const auto& u : corpus) {
            auto f1 = render_speech(u, tpl);
            auto f2 = render_speech(u, tpl);
            CHECK(f1.data == f2.data);
            CHECK(f1.rows() == static_cast<int>(u.text.size()) * tpl.config().frame_rate);
        }
    }
    SECTION("different speakers render the same text differently") {
        ToyUtterance a{0, {1, 2, 3}, 0, 0, 0};
        ToyUtterance b{1, {1, 2, 3}, 1, 0, 0};
        auto fa = render_speech(a, tpl);
        auto fb = render_speech(b, tpl);
        float diff = 0.0f;
        for (size_t i = 0; i < fa.data.size(); ++i) {
            const float d = fa.data[i] - fb.data[i];
            diff += d * d;
        }
        CHECK(diff > 0.0f);
    }
    SECTION("every rendered value stays in [-4, 4]") {
        for (const auto& u : small_corpus(2, 32)) {
            auto f = render_speech(u, tpl);
            for (float v : f.data) {
                CHECK(v >= -4.0f);
                CHECK(v <= 4.0f);
            }
        }
    }
}

TEST_CASE("codec") {
    const auto& codec = test_codec();
    const auto cfg = default_cfg();
    SECTION("encode appends EOS and matches the frame count") {
        for (const auto& u : small_corpus(4, 8)) {
            auto frames = render_speech(u, templates());
            auto tokens = codec.encode(frames);
            CHECK(static_cast<int>(tokens.ids.size()) == frames.rows() + 1);
            CHECK(tokens.ids.back() == codec.eos_id());
        }
    }
    SECTION("a frame exactly at a centroid quantizes to that centroid") {
        for (int c : {0, 7, 100, 255}) {
            CHECK(codec.quantize(codec.centroid(c)) == c);
        }
    }
    SECTION("ties between centroids pick the lowest id") {
        // midpoint between two distinct centroids is equidistant
        std::vector<float> mid(static_cast<size_t>(codec.frame_dim()));
        const float* a = codec.centroid(3);
        const float* b = codec.centroid(9);
        for (int i = 0; i < codec.frame_dim(); ++i)
            mid[static_cast<size_t>(i)] = 0.5f * (a[i] + b[i]);
        const int got = codec.quantize(mid.data());
        // whatever wins must not be beaten by an equal-distance lower id
        const float dg = kernels::sq_dist(mid.data(), codec.centroid(got), codec.frame_dim());
        for (int c = 0; c < got; ++c)
            CHECK(kernels::sq_dist(mid.data(), codec.centroid(c), codec.frame_dim()) > dg);
    }
    SECTION("encode of decode is the identity on random valid tokens") {
        Rng rng(9);
        for (int trial = 0; trial < 50; ++trial) {
            SpeechTokens t;
            const int len = 1 + rng.uniform_int(40);
            for (int i = 0; i < len; ++i) t.ids.push_back(rng.uniform_int(codec.centroid_count()));
            t.ids.push_back(codec.eos_id());
            auto round = codec.encode(codec.decode(t, cfg.frame_rate));
            CHECK(round.ids == t.ids);
        }
    }
    SECTION("decode of encode stays within the quantization radius") {
        float radius = 0.0f;
        std::vector<SpeechFrames> all;
        for (const auto& u : small_corpus(6, 24)) all.push_back(render_speech(u, templates()));
        for (const auto& f : all) radius = std::max(radius, codec.quantization_radius(f));
        for (const auto& f : all) {
            auto decoded = codec.decode(codec.encode(f), cfg.frame_rate);
            for (int r = 0; r < f.rows(); ++r) {
                const float d =
                    std::sqrt(kernels::sq_dist(f.row(r), decoded.row(r), codec.frame_dim()));
                CHECK(d <= radius + 1e-6f);
            }
        }
    }
    SECTION("EOS-only sequence decodes to empty frames") {
        SpeechTokens t;
        t.ids = {codec.eos_id()};
        CHECK(codec.decode(t, cfg.frame_rate).rows() == 0);
    }
    SECTION("unknown token id raises a data error") {
        SpeechTokens t;
        t.ids = {codec.vocab() + 3, codec.eos_id()};
        CHECK_THROWS_AS(codec.decode(t, cfg.frame_rate), DataError);
        SpeechTokens no_eos;
        no_eos.ids = {1, 2, 3};
        CHECK_THROWS_AS(codec.decode(no_eos, cfg.frame_rate), DataError);
    }
}

TEST_CASE("oracle transcription") {
    const auto& tpl = templates();
    const auto& codec = test_codec();
    SECTION("oracle inverts rendering exactly on the corpus") {
        for (const auto& u : small_corpus(12, 48)) {
            auto res = oracle_transcribe(render_speech(u, tpl), tpl);
            CHECK(res.exact());
            CHECK(res.text == u.text);
            CHECK(res.speaker == u.speaker);
            CHECK(res.dialect == u.dialect);
            CHECK(res.emotion == u.emotion);
        }
    }
    SECTION("still exact after a codec round trip") {
        for (const auto& u : small_corpus(13, 48)) {
            auto frames = render_speech(u, tpl);
            auto round = codec.decode(codec.encode(frames), tpl.config().frame_rate);
            auto res = oracle_transcribe(round, tpl);
            CHECK(res.exact());
            CHECK(res.text == u.text);
            CHECK(res.dialect == u.dialect);
            CHECK(res.speaker == u.speaker);
        }
    }
    SECTION("zero frames give empty text") {
        SpeechFrames empty;
        empty.frame_dim = tpl.config().frame_dim;
        empty.frame_rate = tpl.config().frame_rate;
        auto res = oracle_transcribe(empty, tpl);
        CHECK(res.text.empty());
        CHECK(res.failed_groups == 0);
    }
    SECTION("garbage frames are flagged, not misread") {
        SpeechFrames junk;
        junk.frame_dim = tpl.config().frame_dim;
        junk.frame_rate = tpl.config().frame_rate;
        junk.data.assign(static_cast<size_t>(2 * tpl.config().frame_dim), 3.9f);
        auto res = oracle_transcribe(junk, tpl);
        CHECK(res.failed_groups == 1);
        REQUIRE(res.text.size() == 1);
        CHECK(res.text[0] == -1);
    }
}

TEST_CASE("margin property") {
    const auto& tpl = templates();
    const auto& codec = test_codec();
    SECTION("template margin exceeds twice the conservative radius bound") {
        auto rep = check_margins(tpl, codec);
        INFO("margin " << rep.template_margin << " radius " << rep.quantization_radius);
        CHECK(rep.ok);
    }
    SECTION("and twice the measured corpus radius") {
        std::vector<SpeechFrames> frames;
        for (const auto& u : small_corpus(20, 64)) frames.push_back(render_speech(u, tpl));
        auto rep = check_margins_measured(tpl, codec, frames);
        CHECK(rep.ok);
    }
}

TEST_CASE("toy language model continuation") {
    const auto cfg = default_cfg();
    const ToyGrammar grammar(cfg.alphabet);
    SECTION("identical prefixes continue identically") {
        std::vector<int> prefix = {cfg.desc_dialect(1), cfg.desc_emotion(0), 4, 9, 2};
        CHECK(toy_lm_continue(prefix, cfg) == toy_lm_continue(prefix, cfg));
    }
    SECTION("continuation starts with the designated greedy successor") {
        for (int a = 0; a < cfg.alphabet; ++a) {
            std::vector<int> prefix = {a};
            auto cont = toy_lm_continue(prefix, cfg);
            REQUIRE(static_cast<int>(cont.size()) == cfg.continuation_len);
            CHECK(cont[0] == grammar.greedy_next(a));
        }
    }
    SECTION("every continuation step has positive grammar probability") {
        Rng rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<int> prefix = {rng.uniform_int(cfg.alphabet),
                                       rng.uniform_int(cfg.alphabet)};
            auto cont = toy_lm_continue(prefix, cfg);
            int state = prefix.back();
            for (int tok : cont) {
                CHECK(grammar.weight(state, tok) > 0.0);
                state = tok;
            }
        }
    }
}

TEST_CASE("alignment pair construction") {
    const auto& tpl = templates();
    const auto cfg = default_cfg();
    auto corpus = small_corpus(40, 24);
    SECTION("continuation matches the frozen toy LM on the oracle transcript") {
        for (auto strategy : {PairStrategy::TranscriptContinuation, PairStrategy::TtsRendered}) {
            for (const auto& pair : build_alignment_pairs(corpus, strategy, tpl)) {
                auto transcript = oracle_transcribe(pair.prompt_frames, tpl).text;
                std::vector<int> lm_input = pair.descriptor_prefix;
                lm_input.insert(lm_input.end(), transcript.begin(), transcript.end());
                CHECK(pair.continuation_text == toy_lm_continue(lm_input, cfg));
            }
        }
    }
    SECTION("strategy 2 yields one pair per sentence with rendered frames") {
        auto pairs = build_alignment_pairs(corpus, PairStrategy::TtsRendered, tpl);
        REQUIRE(pairs.size() == corpus.size());
        for (size_t i = 0; i < pairs.size(); ++i) {
            ToyUtterance sentence{corpus[i].id, pairs[i].transcript, corpus[i].speaker,
                                  corpus[i].dialect, corpus[i].emotion};
            CHECK(pairs[i].prompt_frames.data == render_speech(sentence, tpl).data);
        }
    }
    SECTION("dialect descriptor token differs across dialects") {
        auto pairs = build_alignment_pairs(corpus, PairStrategy::TranscriptContinuation, tpl);
        for (const auto& a : pairs)
            for (const auto& b : pairs)
                if (a.dialect != b.dialect)
                    CHECK(a.descriptor_prefix[0] != b.descriptor_prefix[0]);
    }
    SECTION("empty corpus is an argument error") {
        CHECK_THROWS_AS(build_alignment_pairs({}, PairStrategy::TranscriptContinuation, tpl),
                        ArgumentError);
    }
}

TEST_CASE("quadruple construction") {
    const auto& tpl = templates();
    const auto& codec = test_codec();
    auto encode = [&](const SpeechFrames& f) { return codec.encode(f); };
    SECTION("four same-key utterances pair into two quadruples") {
        std::vector<ToyUtterance> corpus;
        for (int i = 0; i < 4; ++i) corpus.push_back({i, {1, 2, 3}, 5, 1, 2});
        auto built = build_quadruples(corpus, tpl, encode);
        CHECK(built.quadruples.size() == 2);
        CHECK(built.skipped_utterances == 0);
    }
    SECTION("a lone utterance is skipped and counted") {
        std::vector<ToyUtterance> corpus = {{0, {1}, 3, 0, 0}};
        auto built = build_quadruples(corpus, tpl, encode);
        CHECK(built.quadruples.empty());
        CHECK(built.skipped_utterances == 1);
    }
    SECTION("query and response share speaker, dialect and emotion; responses end in EOS") {
        auto corpus = small_corpus(50, 128);
        auto built = build_quadruples(corpus, tpl, encode);
        REQUIRE_FALSE(built.quadruples.empty());
        for (const auto& q : built.quadruples) {
            auto query_info = oracle_transcribe(q.speech_query, tpl);
            CHECK(query_info.speaker == q.speaker);
            CHECK(query_info.dialect == q.dialect);
            CHECK(query_info.emotion == q.emotion);
            CHECK(q.speech_response.ids.back() == codec.eos_id());
            CHECK(q.speech_response.body_len() ==
                  static_cast<int>(q.text_response.size()) * tpl.config().frame_rate);
        }
    }
}

TEST_CASE("held-out split") {
    int held = 0;
    const int total = 10000;
    for (int i = 0; i < total; ++i) held += is_held_out(i, 0) ? 1 : 0;
    CHECK(held > total / 20);
    CHECK(held < total / 5);
    CHECK(is_held_out(123, 7) == is_held_out(123, 7));
}
