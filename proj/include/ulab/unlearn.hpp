#pragma once

// The unlearning loop. Per epoch: re-select the forget items the model still
// memorizes, walk them in seeded batches interleaved with retain batches,
// and take one optimizer step per batch. For the localized method each batch
// first computes its own regularized attribution and the resulting neuron
// mask; the update then touches only the masked parameter image. Training
// stops early once forget-set accuracy falls to the configured threshold.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ulab/attribution.hpp"
#include "ulab/evalkit.hpp"
#include "ulab/losses.hpp"
#include "ulab/microlm.hpp"
#include "ulab/rng.hpp"
#include "ulab/worldgen.hpp"

namespace ulab::unlearn {

// Forget items the model still memorizes under candidate-restricted argmax.
template <class S>
std::vector<const world::QAItem*> select_unforgotten(const lm::ModelState<S>& model,
                                                     const std::vector<const world::QAItem*>& items) {
    const auto fn = eval::model_answer_fn(model);
    std::vector<const world::QAItem*> active;
    for (const auto* item : items)
        if (eval::memorization(fn, *item) == 1) active.push_back(item);
    return active;
}

struct EpochRecord {
    int epoch = 0;
    double ua = 0.0;  // percent, forget base items
    int skipped = 0;  // forget items excluded as already unlearned
    int steps = 0;
    double loss_forget = 0.0;  // epoch means of the loss components
    double loss_retain = 0.0;
    double loss_total = 0.0;
};

template <class S>
struct RunResult {
    std::vector<EpochRecord> history;
    bool early_stopped = false;
    double final_ua = 0.0;
};

template <class S>
using EpochCallback = std::function<void(const lm::ModelState<S>&, const EpochRecord&)>;

template <class S>
RunResult<S> unlearn_run(lm::ModelState<S>& model, const world::Dataset& ds,
                         const world::Splits& splits, const UnlearnConfig& cfg,
                         const EpochCallback<S>& on_epoch = nullptr) {
    cfg.validate();
    const double lr = resolved_lr(cfg);

    std::vector<const world::QAItem*> forget_pool, retain_pool;
    for (int id : splits.forget) {
        const auto* c = ds.cluster_by_id(id);
        if (!c) throw ConfigError("unlearn_run: unknown forget cluster " + std::to_string(id));
        forget_pool.push_back(&c->base);
    }
    for (int id : splits.retain) {
        const auto* c = ds.cluster_by_id(id);
        if (!c) throw ConfigError("unlearn_run: unknown retain cluster " + std::to_string(id));
        retain_pool.push_back(&c->base);
    }
    if (forget_pool.empty()) throw ConfigError("unlearn_run: empty forget set");

    ReferenceContext<S> ref_ctx;
    std::optional<lm::ModelState<S>> reference;
    if (method_needs_reference(cfg.method)) {
        reference = make_reference(model);
        ref_ctx.model = &*reference;
    }
    if (cfg.method == Method::rmu) {
        if (cfg.rmu_layer < 0 || cfg.rmu_layer >= model.cfg.n_layers)
            throw ConfigError("unlearn_run: rmu_layer out of range");
        Rng urng(derive_seed(cfg.seed, "unlearn/rmu"));
        std::vector<S> u(static_cast<size_t>(model.cfg.d_ffn));
        double norm = 0.0;
        for (auto& v : u) {
            v = static_cast<S>(urng.normal());
            norm += static_cast<double>(v) * static_cast<double>(v);
        }
        norm = std::sqrt(norm);
        for (auto& v : u) v = static_cast<S>(v / norm);
        ref_ctx.rmu_unit = std::move(u);
    }

    const int reject_token = ds.vocab.require(world::kRejectToken);
    Rng rng(derive_seed(cfg.seed, "unlearn/loop"));

    auto eval_ua = [&]() {
        const auto fn = eval::model_answer_fn(model);
        int hits = 0;
        for (const auto* item : forget_pool) hits += eval::memorization(fn, *item);
        return 100.0 * static_cast<double>(hits) / static_cast<double>(forget_pool.size());
    };

    auto pick_alt = [&](const world::QAItem& item) {
        if (cfg.method == Method::dpo_rej) return reject_token;
        if (cfg.method == Method::dpo_mis) {
            std::vector<int> distractors;
            for (int c : item.candidates)
                if (c != item.answer) distractors.push_back(c);
            return distractors[static_cast<size_t>(
                rng.randint(0, static_cast<int64_t>(distractors.size()) - 1))];
        }
        return -1;
    };

    // mismatched pairs for one target answer: unrelated questions drawn from
    // the forget and retain pools, never one that shares the answer
    auto sample_mismatched = [&](int target_answer) {
        std::vector<const world::QAItem*> eligible;
        for (const auto* pool : {&forget_pool, &retain_pool})
            for (const auto* item : *pool)
                if (item->answer != target_answer) eligible.push_back(item);
        rng.shuffle(eligible);
        const size_t n = std::min<size_t>(static_cast<size_t>(cfg.n_mismatch), eligible.size());
        std::vector<QuestionAnswer> out;
        out.reserve(n);
        for (size_t i = 0; i < n; ++i)
            out.push_back({eligible[i]->question, target_answer, eligible[i]->id});
        return out;
    };

    RunResult<S> result;
    result.final_ua = 100.0;
    const int64_t total_neurons =
        static_cast<int64_t>(model.cfg.n_layers) * static_cast<int64_t>(model.cfg.d_ffn);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto active = select_unforgotten(model, forget_pool);
        const int skipped = static_cast<int>(forget_pool.size() - active.size());
        rng.shuffle(active);

        auto retain_order = retain_pool;
        rng.shuffle(retain_order);
        size_t retain_cursor = 0;
        auto next_retain_batch = [&]() {
            std::vector<LossItem> batch;
            if (retain_order.empty()) return batch;
            for (int i = 0; i < cfg.batch_size; ++i) {
                const auto* item = retain_order[retain_cursor % retain_order.size()];
                ++retain_cursor;
                batch.push_back({item, pick_alt(*item)});
            }
            return batch;
        };

        EpochRecord record;
        record.epoch = epoch;
        record.skipped = skipped;

        for (size_t start = 0; start < active.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<LossItem> forget_batch;
            std::vector<QuestionAnswer> attr_batch;
            const size_t stop = std::min(active.size(), start + static_cast<size_t>(cfg.batch_size));
            for (size_t i = start; i < stop; ++i) {
                forget_batch.push_back({active[i], pick_alt(*active[i])});
                attr_batch.push_back({active[i]->question, active[i]->answer, active[i]->id});
            }
            const auto retain_batch = next_retain_batch();

            std::optional<NeuronMask> mask;
            if (cfg.method == Method::klue) {
                if (cfg.random_neurons) {
                    const auto keep = static_cast<int64_t>(
                        std::ceil(cfg.neuron_ratio * static_cast<double>(total_neurons)));
                    std::vector<int64_t> all(static_cast<size_t>(total_neurons));
                    for (int64_t i = 0; i < total_neurons; ++i) all[static_cast<size_t>(i)] = i;
                    rng.shuffle(all);
                    NeuronMask m;
                    for (int64_t i = 0; i < keep; ++i)
                        m.selected.emplace_back(static_cast<int>(all[static_cast<size_t>(i)] / model.cfg.d_ffn),
                                                static_cast<int>(all[static_cast<size_t>(i)] % model.cfg.d_ffn));
                    std::sort(m.selected.begin(), m.selected.end());
                    mask = std::move(m);
                } else {
                    // per-item attribution, regularized by that item's own
                    // mismatched pairs, averaged over the batch
                    std::vector<AttributionMap> regs;
                    for (const auto& qa : attr_batch) {
                        auto base = attribute_one(model, qa);
                        regs.push_back(
                            regularize(base, model, sample_mismatched(qa.answer), cfg.alpha));
                    }
                    auto combined = mean_maps(regs);
                    combined.regularized = true;
                    mask = select_neurons(combined, cfg.neuron_ratio);
                }
            }

            LossBundle<S> bundle;
            {
                ag::GradTape<S> tape;
                bundle = loss_for_method(cfg.method, model,
                                         ref_ctx.model ? &ref_ctx : nullptr, forget_batch,
                                         retain_batch, cfg);
                const double total = static_cast<double>(bundle.total.item());
                if (!std::isfinite(total))
                    throw NumericError("unlearn_run: non-finite loss (method " +
                                       std::string(method_name(cfg.method)) + ", epoch " +
                                       std::to_string(epoch) + ")");
                tape.backward(bundle.total);
                lm::apply_gradients(model, lr, mask ? &*mask : nullptr);
                model.zero_grad();
            }
            record.loss_forget += bundle.forget_term;
            record.loss_retain += bundle.retain_term;
            record.loss_total += static_cast<double>(bundle.total.item());
            ++record.steps;
        }

        if (record.steps > 0) {
            record.loss_forget /= record.steps;
            record.loss_retain /= record.steps;
            record.loss_total /= record.steps;
        }
        record.ua = eval_ua();
        result.final_ua = record.ua;
        result.history.push_back(record);
        if (on_epoch) on_epoch(model, record);
        if (record.ua <= cfg.ua_stop_threshold) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

}  // namespace ulab::unlearn
