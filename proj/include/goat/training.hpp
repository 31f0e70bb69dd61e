// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "goat/io.hpp"
#include "goat/model.hpp"
#include "goat/param_store.hpp"
#include "goat/toy_world.hpp"

namespace goat {

// The regimen: an LM pretraining pass (stands in for the pretrained LLM the
// paper assumes), two modality-alignment steps, two speech-generation steps,
// and the unfrozen single-branch comparison arm.
enum class Stage {
    Pretrain,
    AlignStep1,
    AlignStep2,
    GenerateStep1,
    GenerateStep2,
    FullFinetuneBaseline,
};

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Pretrain: return "pretrain";
        case Stage::AlignStep1: return "align_step1";
        case Stage::AlignStep2: return "align_step2";
        case Stage::GenerateStep1: return "generate_step1";
        case Stage::GenerateStep2: return "generate_step2";
        case Stage::FullFinetuneBaseline: return "full_finetune_baseline";
    }
    return "?";
}

struct StageSpec {
    Stage stage = Stage::Pretrain;
    int epochs = 10;
    int batch_size = 8;
    float lr = 3e-4f;
    uint64_t seed = 0;
};

// Parameter-name predicate for the frozen set of each stage. This is the
// single source of truth the conformance checks run against.
inline bool stage_freezes(Stage stage, const std::string& name) {
    const bool enc = DualBranchModel::is_encoder(name);
    const bool proj = DualBranchModel::is_projector(name);
    const bool bottom = DualBranchModel::is_shared_bottom(name);
    const bool text = DualBranchModel::is_text_branch(name);
    const bool speech = DualBranchModel::is_speech_branch(name);
    switch (stage) {
        case Stage::Pretrain:
            return enc || proj || speech;  // train the LLM trunk and text head
        case Stage::AlignStep1:
        case Stage::AlignStep2:
            return !(enc || proj);  // LLM parameters stay frozen in both steps
        case Stage::GenerateStep1:
        case Stage::GenerateStep2:
            return enc || proj || bottom || text;  // only the speech branch moves
        case Stage::FullFinetuneBaseline:
            return enc || proj || text;  // one branch, no preserved text copy
    }
    return true;
}

struct TrainReport {
    std::string stage;
    std::vector<double> epoch_mean_loss;
    std::map<std::string, uint64_t> checksum_before;
    std::map<std::string, uint64_t> checksum_after;
    std::vector<std::string> frozen_names;
    std::vector<std::string> changed_params;
    bool freeze_honored = false;
    int skipped_items = 0;   // context overflows
    int rejected_items = 0;  // failed input validation
    std::map<std::string, int> data_mix;  // per-dialect item counts
    std::vector<double> first_batch_item_losses;
    double wall_seconds = 0.0;  // console only, never serialized

    double first_epoch_loss() const { return epoch_mean_loss.front(); }
    double final_epoch_loss() const { return epoch_mean_loss.back(); }

    // deterministic fields only; reruns must be byte-identical
    Json to_json() const {
        Json j;
        j["stage"] = stage;
        j["epoch_mean_loss"] = epoch_mean_loss;
        j["freeze_honored"] = freeze_honored;
        j["frozen_params"] = static_cast<int>(frozen_names.size());
        j["changed_params"] = changed_params;
        j["skipped_items"] = skipped_items;
        j["rejected_items"] = rejected_items;
        j["data_mix"] = data_mix;
        Json sums = Json::object();
        for (const auto& [name, sum] : checksum_after) sums[name] = sum;
        j["checksums"] = std::move(sums);
        return j;
    }
};

namespace detail {

// Shared epoch/batch loop. loss_for_item builds the per-item loss in the
// given graph or reports a skip by returning an invalid Var.
inline TrainReport run_training(ParamStore& params, Stage stage, int item_count,
                                const StageSpec& spec,
                                const std::function<Var(Graph&, int)>& loss_for_item) {
    if (item_count <= 0) throw ArgumentError("training: empty data");
    const auto t0 = std::chrono::steady_clock::now();

    params.freeze_where([stage](const std::string& n) { return stage_freezes(stage, n); });
    params.reset_optimizer();

    TrainReport report;
    report.stage = stage_name(stage);
    report.checksum_before = params.checksums();
    for (const auto& name : params.names())
        if (params.frozen(name)) report.frozen_names.push_back(name);

    AdamHyper hyper;
    hyper.lr = spec.lr;

    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        // seeded permutation, fixed order per (seed, epoch)
        std::vector<int> order(static_cast<size_t>(item_count));
        for (int i = 0; i < item_count; ++i) order[static_cast<size_t>(i)] = i;
        Rng shuffle_rng(hash_combine(spec.seed, 0x65706f63ull + static_cast<uint64_t>(epoch)));
        for (int i = item_count - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);

        double epoch_loss = 0.0;
        int epoch_items = 0;
        for (int start = 0; start < item_count; start += spec.batch_size) {
            Graph g;
            std::vector<Var> losses;
            for (int b = start; b < std::min(item_count, start + spec.batch_size); ++b) {
                Var item_loss;
                try {
                    item_loss = loss_for_item(g, order[static_cast<size_t>(b)]);
                } catch (const ContextOverflowError&) {
                    if (epoch == 0) report.skipped_items += 1;
                    continue;
                }
                if (!item_loss.valid()) continue;
                losses.push_back(item_loss);
                const double v = static_cast<double>(g.value(item_loss).data[0]);
                epoch_loss += v;
                epoch_items += 1;
                if (epoch == 0 && start == 0) report.first_batch_item_losses.push_back(v);
            }
            if (losses.empty()) continue;
            Var total = losses[0];
            for (size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
            total = g.scale(total, 1.0f / static_cast<float>(losses.size()));
            g.backward(total);
            adam_step(params, g.named_gradients(), hyper);
        }
        report.epoch_mean_loss.push_back(epoch_items ? epoch_loss / epoch_items : 0.0);
    }

    report.checksum_after = params.checksums();
    report.freeze_honored = true;
    for (const auto& [name, before] : report.checksum_before) {
        if (report.checksum_after.at(name) != before) {
            report.changed_params.push_back(name);
            if (params.frozen(name)) report.freeze_honored = false;
        }
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace detail

// full next-token sequence for one utterance: descriptors, transcript, and
// the frozen toy LM's continuation
inline std::vector<int> pretrain_tokens(const ToyUtterance& u, const ToyConfig& toy) {
    std::vector<int> tokens = descriptor_prefix_for(u, toy);
    tokens.insert(tokens.end(), u.text.begin(), u.text.end());
    auto cont = toy_lm_continue(tokens, toy);
    tokens.insert(tokens.end(), cont.begin(), cont.end());
    return tokens;
}

// Stage 0: next-token pretraining of the text LLM on grammar text. This is
// the desk-scale stand-in for the paper's pretrained LLM; everything later
// treats the result as the frozen foundation.
inline TrainReport pretrain_lm(DualBranchModel& model, const std::vector<ToyUtterance>& corpus,
                               const ToyConfig& toy, const StageSpec& spec) {
    auto report = detail::run_training(
        model.params(), Stage::Pretrain, static_cast<int>(corpus.size()), spec,
        [&](Graph& g, int idx) {
            auto seq = assemble_text_only(model, g, pretrain_tokens(corpus[static_cast<size_t>(idx)], toy));
            Var logits = model.forward_text_branch(g, seq.input);
            return g.cross_entropy(logits, seq.text_targets, -1);
        });
    // the branches must agree bitwise before any Stage II update
    model.sync_speech_branch();
    return report;
}

namespace detail {

inline TrainReport train_align(DualBranchModel& model, const std::vector<AlignmentPair>& pairs,
                               Stage stage, const StageSpec& spec) {
    if (pairs.empty()) throw ArgumentError("train_align: empty data");
    auto report = detail::run_training(
        model.params(), stage, static_cast<int>(pairs.size()), spec, [&](Graph& g, int idx) {
            auto seq = assemble_alignment(model, g, pairs[static_cast<size_t>(idx)]);
            Var logits = model.forward_text_branch(g, seq.input);
            return g.cross_entropy(logits, seq.text_targets, -1);
        });
    for (const auto& p : pairs)
        report.data_mix["dialect_" + std::to_string(p.dialect)] += 1;
    model.sync_speech_branch();
    return report;
}

}  // namespace detail

// Step I: base-language pairs only; encoder and projector update, the LLM
// stays frozen.
inline TrainReport train_align_step1(DualBranchModel& model,
                                     const std::vector<AlignmentPair>& pairs,
                                     const StageSpec& spec) {
    return detail::train_align(model, pairs, Stage::AlignStep1, spec);
}

// Step II: balanced dialect/emotion mix, same freeze set.
inline TrainReport train_align_step2(DualBranchModel& model,
                                     const std::vector<AlignmentPair>& pairs,
                                     const StageSpec& spec) {
    return detail::train_align(model, pairs, Stage::AlignStep2, spec);
}

// held-out alignment loss (no updates)
inline double alignment_loss(DualBranchModel& model, const std::vector<AlignmentPair>& pairs) {
    if (pairs.empty()) throw ArgumentError("alignment_loss: empty data");
    double total = 0.0;
    int count = 0;
    for (const auto& p : pairs) {
        Graph g;
        try {
            auto seq = assemble_alignment(model, g, p);
            Var logits = model.forward_text_branch(g, seq.input);
            Var loss = g.cross_entropy(logits, seq.text_targets, -1);
            total += static_cast<double>(g.value(loss).data[0]);
            count += 1;
        } catch (const ContextOverflowError&) {
        }
    }
    return count ? total / count : 0.0;
}

// Step I of speech generation (cold start): base-language items use the text
// query, dialect items the speech query; encoder, projector, bottom layers
// and the whole text branch are frozen. Copies the text branch into the
// speech branch before the first update.
inline TrainReport train_generate_step1(DualBranchModel& model,
                                        const std::vector<Quadruple>& quads,
                                        const StageSpec& spec, int base_dialect = 0) {
    if (quads.empty()) throw ArgumentError("train_generate_step1: empty data");
    model.sync_speech_branch();
    auto report = detail::run_training(
        model.params(), Stage::GenerateStep1, static_cast<int>(quads.size()), spec,
        [&](Graph& g, int idx) {
            const Quadruple& q = quads[static_cast<size_t>(idx)];
            const bool use_text_query = q.dialect == base_dialect;
            auto seq = assemble_generation(model, g, q, use_text_query);
            Var hidden = model.forward_speech_branch(g, seq.input);
            return speech_generation_loss(model, g, hidden, seq);
        });
    for (const auto& q : quads)
        report.data_mix["dialect_" + std::to_string(q.dialect)] += 1;
    return report;
}

// Step II: prompt-driven generation, speech queries everywhere. Items
// lacking a speech query are rejected and counted.
inline TrainReport train_generate_step2(DualBranchModel& model,
                                        const std::vector<Quadruple>& quads,
                                        const StageSpec& spec) {
    if (quads.empty()) throw ArgumentError("train_generate_step2: empty data");
    std::vector<const Quadruple*> usable;
    int rejected = 0;
    for (const auto& q : quads) {
        if (q.speech_query.empty())
            rejected += 1;
        else
            usable.push_back(&q);
    }
    if (usable.empty()) throw ArgumentError("train_generate_step2: no items with speech queries");
    auto report = detail::run_training(
        model.params(), Stage::GenerateStep2, static_cast<int>(usable.size()), spec,
        [&](Graph& g, int idx) {
            auto seq = assemble_generation(model, g, *usable[static_cast<size_t>(idx)], false);
            Var hidden = model.forward_speech_branch(g, seq.input);
            return speech_generation_loss(model, g, hidden, seq);
        });
    report.rejected_items = rejected;
    for (const auto* q : usable)
        report.data_mix["dialect_" + std::to_string(q->dialect)] += 1;
    return report;
}

// Comparison arm: unfreezes the shared bottom and the speech top of a single
// branch (no preserved text copy); demonstrates the forgetting the dual
// branch avoids. Run on a copy of the model.
inline TrainReport full_finetune_baseline(DualBranchModel& model,
                                          const std::vector<Quadruple>& quads,
                                          const StageSpec& spec) {
    if (quads.empty()) throw ArgumentError("full_finetune_baseline: empty data");
    model.sync_speech_branch();
    auto report = detail::run_training(
        model.params(), Stage::FullFinetuneBaseline, static_cast<int>(quads.size()), spec,
        [&](Graph& g, int idx) {
            auto seq = assemble_generation(model, g, quads[static_cast<size_t>(idx)], false);
            Var hidden = model.forward_speech_branch(g, seq.input);
            return speech_generation_loss(model, g, hidden, seq);
        });
    return report;
}

// teacher-forced greedy token accuracy on speech-response slots
inline double speech_token_accuracy(DualBranchModel& model, const std::vector<Quadruple>& quads) {
    if (quads.empty()) throw ArgumentError("speech_token_accuracy: empty data");
    int64_t correct = 0, total = 0;
    for (const auto& q : quads) {
        Graph g;
        AssembledSequence seq;
        try {
            seq = assemble_generation(model, g, q, false);
        } catch (const ContextOverflowError&) {
            continue;
        }
        Var hidden = model.forward_speech_branch(g, seq.input);
        Var rows = g.gather_rows(hidden, seq.group_rows);
        const int n_groups = static_cast<int>(seq.group_tokens.size());
        for (int sub = 0; sub < model.config().group_size; ++sub) {
            std::vector<int> prev_ids(static_cast<size_t>(n_groups), 0);
            bool any = false;
            for (int j = 0; j < n_groups; ++j) {
                const auto& grp = seq.group_tokens[static_cast<size_t>(j)];
                if (sub < static_cast<int>(grp.size())) any = true;
                if (sub > 0 && sub - 1 < static_cast<int>(grp.size()))
                    prev_ids[static_cast<size_t>(j)] = grp[static_cast<size_t>(sub) - 1];
            }
            if (!any) continue;
            Var prev_emb;
            if (sub > 0) prev_emb = g.embedding(model.params().leaf(g, "speech.tok_emb"), prev_ids);
            Var logits = model.group_head_logits(g, rows, sub, prev_emb);
            const Tensor& lv = g.value(logits);
            for (int j = 0; j < n_groups; ++j) {
                const auto& grp = seq.group_tokens[static_cast<size_t>(j)];
                if (sub >= static_cast<int>(grp.size())) continue;
                int best = 0;
                for (int v = 1; v < lv.cols(); ++v)
                    if (lv.at(j, v) > lv.at(j, best)) best = v;
                correct += best == grp[static_cast<size_t>(sub)] ? 1 : 0;
                total += 1;
            }
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// mean next-token cross entropy of the text path on held-out text; the
// baseline variant routes through the tuned single branch with the original
// text head on top
inline double text_cross_entropy(DualBranchModel& model, const std::vector<ToyUtterance>& texts,
                                 const ToyConfig& toy, bool through_speech_top = false) {
    if (texts.empty()) throw ArgumentError("text_cross_entropy: empty data");
    double total = 0.0;
    int count = 0;
    for (const auto& u : texts) {
        Graph g;
        auto seq = assemble_text_only(model, g, pretrain_tokens(u, toy));
        Var logits;
        if (through_speech_top) {
            Var hidden = model.forward_speech_branch(g, seq.input);
            logits = g.add_bias(g.matmul(hidden, model.params().leaf(g, "text.head.w")),
                                model.params().leaf(g, "text.head.b"));
        } else {
            logits = model.forward_text_branch(g, seq.input);
        }
        Var loss = g.cross_entropy(logits, seq.text_targets, -1);
        total += static_cast<double>(g.value(loss).data[0]);
        count += 1;
    }
    return total / count;
}

inline double text_perplexity(DualBranchModel& model, const std::vector<ToyUtterance>& texts,
                              const ToyConfig& toy, bool through_speech_top = false) {
    return std::exp(text_cross_entropy(model, texts, toy, through_speech_top));
}

// fixed probe batch: text-branch logits, concatenated; bitwise comparisons
// prove the text branch never moves during Stage II
inline std::vector<float> probe_text_logits(DualBranchModel& model,
                                            const std::vector<ToyUtterance>& probe,
                                            const ToyConfig& toy) {
    std::vector<float> out;
    for (const auto& u : probe) {
        Graph g;
        auto seq = assemble_text_only(model, g, pretrain_tokens(u, toy));
        Var logits = model.forward_text_branch(g, seq.input);
        const auto& v = g.value(logits).data;
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

}  // namespace goat
