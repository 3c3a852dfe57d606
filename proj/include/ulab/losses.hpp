#pragma once

// Unlearning objectives. All losses are minimized scalars built from tensor
// ops, so every method is differentiable end to end. Reference-model
// quantities enter as constants: the reference is frozen, so its log-probs
// and activations are cached per question.

#include <map>
#include <string>
#include <vector>

#include "ulab/errors.hpp"
#include "ulab/microlm.hpp"
#include "ulab/worldgen.hpp"

namespace ulab::unlearn {

enum class Method { ga, ga_ret, dpo_mis, dpo_rej, npo, rmu, klue };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::ga: return "ga";
        case Method::ga_ret: return "ga_ret";
        case Method::dpo_mis: return "dpo_mis";
        case Method::dpo_rej: return "dpo_rej";
        case Method::npo: return "npo";
        case Method::rmu: return "rmu";
        case Method::klue: return "klue";
    }
    return "?";
}

inline Method method_from_name(const std::string& name) {
    for (Method m : {Method::ga, Method::ga_ret, Method::dpo_mis, Method::dpo_rej, Method::npo,
                     Method::rmu, Method::klue})
        if (name == method_name(m)) return m;
    throw ConfigError("unknown unlearning method '" + name + "'");
}

inline bool method_needs_reference(Method m) {
    return m == Method::dpo_mis || m == Method::dpo_rej || m == Method::npo || m == Method::rmu;
}

struct UnlearnConfig {
    Method method = Method::klue;
    double lr = 0.0;  // 0 resolves to the per-method default
    double forget_weight = 0.7;
    double retain_weight = 1.0;
    int batch_size = 4;
    int max_epochs = 150;
    double ua_stop_threshold = 33.34;  // percent scale; chance level for 3 options
    double alpha = 10.0;
    int n_mismatch = 5;
    double neuron_ratio = 0.05;
    bool random_neurons = false;  // baseline: random mask of the same size
    double beta_pref = 0.1;
    double rmu_c = 20.0;
    int rmu_layer = 1;
    int checkpoint_every = 0;
    uint64_t seed = 0;

    void validate() const {
        if (forget_weight < 0 || retain_weight < 0)
            throw ConfigError("unlearn: loss weights must be non-negative");
        if (batch_size < 1) throw ConfigError("unlearn: batch_size must be >= 1");
        if (max_epochs < 0) throw ConfigError("unlearn: max_epochs must be >= 0");
        if (neuron_ratio < 0.0 || neuron_ratio > 1.0)
            throw ConfigError("unlearn: neuron_ratio must lie in [0,1]");
        if (alpha < 0) throw ConfigError("unlearn: alpha must be non-negative");
        if (n_mismatch < 0) throw ConfigError("unlearn: n_mismatch must be >= 0");
        if (beta_pref <= 0) throw ConfigError("unlearn: beta_pref must be positive");
        if (lr < 0) throw ConfigError("unlearn: lr must be non-negative");
        if (ua_stop_threshold < 0 || ua_stop_threshold > 100)
            throw ConfigError("unlearn: ua_stop_threshold is a percentage");
    }
};

// Desk-scale analog of the per-method learning-rate search: each method gets
// a calibrated default; an explicit lr overrides it.
inline double method_default_lr(Method m) {
    switch (m) {
        case Method::ga: return 0.02;
        case Method::ga_ret: return 0.02;
        case Method::dpo_mis: return 0.05;
        case Method::dpo_rej: return 0.05;
        case Method::npo: return 0.05;
        case Method::rmu: return 0.005;
        case Method::klue: return 2.0;
    }
    return 0.02;
}

inline double resolved_lr(const UnlearnConfig& cfg) {
    return cfg.lr > 0 ? cfg.lr : method_default_lr(cfg.method);
}

// One training example inside a loss batch. alt_answer carries the method's
// auxiliary token: the rejection token or a sampled mismatched answer for the
// preference losses, unused otherwise.
struct LossItem {
    const world::QAItem* item = nullptr;
    int alt_answer = -1;
};

// Frozen reference quantities, filled lazily. The reference model's
// parameters must not require gradients.
template <class S>
struct ReferenceContext {
    const lm::ModelState<S>* model = nullptr;
    std::vector<S> rmu_unit;  // fixed random unit vector, length d_ffn

    std::map<std::vector<int>, std::vector<double>> logprob_cache;
    std::map<std::vector<int>, std::vector<S>> act_cache;

    const std::vector<double>& logprobs(const std::vector<int>& question) {
        auto it = logprob_cache.find(question);
        if (it != logprob_cache.end()) return it->second;
        auto fwd = lm::forward(*model, question);
        const auto& logits = fwd.last_logits.values();
        double mx = -std::numeric_limits<double>::infinity();
        for (S v : logits) mx = std::max(mx, static_cast<double>(v));
        double denom = 0.0;
        for (S v : logits) denom += std::exp(static_cast<double>(v) - mx);
        const double lse = mx + std::log(denom);
        std::vector<double> lp(logits.size());
        for (size_t i = 0; i < logits.size(); ++i) lp[i] = static_cast<double>(logits[i]) - lse;
        return logprob_cache.emplace(question, std::move(lp)).first->second;
    }

    const std::vector<S>& activations(const std::vector<int>& question, int layer) {
        auto it = act_cache.find(question);
        if (it != act_cache.end()) return it->second;
        lm::ForwardOptions<S> opts;
        opts.capture_ffn = true;
        auto fwd = lm::forward(*model, question, opts);
        return act_cache.emplace(question, fwd.acts.at(layer).values()).first->second;
    }
};

template <class S>
lm::ModelState<S> make_reference(const lm::ModelState<S>& model) {
    lm::ModelState<S> ref = model.clone();
    for (auto& [name, t] : ref.named_parameters()) t->set_requires_grad(false);
    return ref;
}

// For reporting: the loss components as plain numbers next to the
// differentiable total.
template <class S>
struct LossBundle {
    ag::Tensor<S> total;
    double forget_term = 0.0;
    double retain_term = 0.0;
};

namespace loss_detail {

template <class S>
ag::Tensor<S> mean_or_zero(std::vector<ag::Tensor<S>> parts) {
    if (parts.empty()) return ag::Tensor<S>::scalar(S(0));
    ag::Tensor<S> acc = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) acc = ag::add(acc, parts[i]);
    return ag::scale(acc, 1.0 / static_cast<double>(parts.size()));
}

// log P(token | question) picked for gold and alt from one forward pass
template <class S>
std::pair<ag::Tensor<S>, ag::Tensor<S>> logprob_pair(const lm::ModelState<S>& model,
                                                     const std::vector<int>& q, int gold, int alt) {
    auto fwd = lm::forward(model, q);
    auto lp = ag::log_softmax(ag::reshape(fwd.last_logits, {model.cfg.vocab_size}));
    return {ag::pick(lp, gold), ag::pick(lp, alt)};
}

template <class S>
ag::Tensor<S> logprob_one(const lm::ModelState<S>& model, const std::vector<int>& q, int token) {
    auto fwd = lm::forward(model, q);
    auto lp = ag::log_softmax(ag::reshape(fwd.last_logits, {model.cfg.vocab_size}));
    return ag::pick(lp, token);
}

template <class S>
ag::Tensor<S> mse_to_target(const ag::Tensor<S>& act, const std::vector<S>& target) {
    auto diff = ag::sub(act, ag::Tensor<S>::from(act.shape(), target));
    return ag::scale(ag::sum_all(ag::mul(diff, diff)), 1.0 / static_cast<double>(act.size()));
}

}  // namespace loss_detail

// The minimized objective for one step of the requested method. klue shares
// the ascent-with-retention objective; its masking happens at update time.
template <class S>
LossBundle<S> loss_for_method(Method method, const lm::ModelState<S>& model,
                              std::type_identity_t<ReferenceContext<S>*> ref,
                              const std::vector<LossItem>& forget_batch,
                              const std::vector<LossItem>& retain_batch,
                              const UnlearnConfig& cfg) {
    using T = ag::Tensor<S>;
    namespace d = loss_detail;
    if (method_needs_reference(method) && (ref == nullptr || ref->model == nullptr))
        throw ConfigError(std::string("loss_for_method: ") + method_name(method) +
                          " requires a reference model");

    const double beta = cfg.beta_pref;
    T forget_term, retain_term;

    switch (method) {
        case Method::ga:
        case Method::ga_ret:
        case Method::klue: {
            std::vector<T> f;
            for (const auto& it : forget_batch)
                f.push_back(lm::lm_loss(model, it.item->question, it.item->answer));
            forget_term = ag::scale(d::mean_or_zero(std::move(f)), -1.0);  // ascent on the nll
            std::vector<T> r;
            if (method != Method::ga)
                for (const auto& it : retain_batch)
                    r.push_back(lm::lm_loss(model, it.item->question, it.item->answer));
            retain_term = d::mean_or_zero(std::move(r));
            break;
        }
        case Method::dpo_mis:
        case Method::dpo_rej: {
            auto preference = [&](const LossItem& it, bool prefer_alt) {
                if (it.alt_answer < 0)
                    throw ConfigError("loss_for_method: preference item without alternative answer");
                const auto& ref_lp = ref->logprobs(it.item->question);
                auto [lp_gold, lp_alt] =
                    d::logprob_pair(model, it.item->question, it.item->answer, it.alt_answer);
                auto gold_ratio = ag::sub(lp_gold, T::scalar(static_cast<S>(ref_lp[static_cast<size_t>(it.item->answer)])));
                auto alt_ratio = ag::sub(lp_alt, T::scalar(static_cast<S>(ref_lp[static_cast<size_t>(it.alt_answer)])));
                auto z = prefer_alt ? ag::sub(alt_ratio, gold_ratio) : ag::sub(gold_ratio, alt_ratio);
                return ag::softplus(ag::scale(z, -beta));  // -log sigmoid(beta * z)
            };
            std::vector<T> f;
            for (const auto& it : forget_batch) f.push_back(preference(it, /*prefer_alt=*/true));
            forget_term = d::mean_or_zero(std::move(f));
            std::vector<T> r;
            for (const auto& it : retain_batch) r.push_back(preference(it, /*prefer_alt=*/false));
            retain_term = d::mean_or_zero(std::move(r));
            break;
        }
        case Method::npo: {
            std::vector<T> f;
            for (const auto& it : forget_batch) {
                const auto& ref_lp = ref->logprobs(it.item->question);
                auto lp_gold = d::logprob_one(model, it.item->question, it.item->answer);
                auto z = ag::sub(lp_gold,
                                 T::scalar(static_cast<S>(ref_lp[static_cast<size_t>(it.item->answer)])));
                f.push_back(ag::scale(ag::softplus(ag::scale(z, beta)), 2.0 / beta));
            }
            forget_term = d::mean_or_zero(std::move(f));
            std::vector<T> r;
            for (const auto& it : retain_batch)
                r.push_back(lm::lm_loss(model, it.item->question, it.item->answer));
            retain_term = d::mean_or_zero(std::move(r));
            break;
        }
        case Method::rmu: {
            if (cfg.rmu_layer < 0 || cfg.rmu_layer >= model.cfg.n_layers)
                throw ConfigError("loss_for_method: rmu_layer out of range");
            if (ref->rmu_unit.size() != static_cast<size_t>(model.cfg.d_ffn))
                throw ConfigError("loss_for_method: rmu unit vector not initialized");
            auto capture = [&](const std::vector<int>& q) {
                lm::ForwardOptions<S> opts;
                opts.capture_ffn = true;
                return lm::forward(model, q, opts).acts;
            };
            std::vector<T> f;
            for (const auto& it : forget_batch) {
                auto acts = capture(it.item->question);
                const auto& act = acts.at(cfg.rmu_layer);
                const int L = act.shape()[0];
                std::vector<S> target(static_cast<size_t>(L) * model.cfg.d_ffn);
                for (int t = 0; t < L; ++t)
                    for (int i = 0; i < model.cfg.d_ffn; ++i)
                        target[static_cast<size_t>(t) * model.cfg.d_ffn + i] =
                            static_cast<S>(cfg.rmu_c) * ref->rmu_unit[static_cast<size_t>(i)];
                f.push_back(d::mse_to_target(act, target));
            }
            forget_term = d::mean_or_zero(std::move(f));
            std::vector<T> r;
            for (const auto& it : retain_batch) {
                auto acts = capture(it.item->question);
                r.push_back(d::mse_to_target(acts.at(cfg.rmu_layer),
                                             ref->activations(it.item->question, cfg.rmu_layer)));
            }
            retain_term = d::mean_or_zero(std::move(r));
            break;
        }
    }

    LossBundle<S> bundle;
    bundle.forget_term = static_cast<double>(forget_term.item());
    bundle.retain_term = static_cast<double>(retain_term.item());
    bundle.total = ag::add(ag::scale(forget_term, cfg.forget_weight),
                           ag::scale(retain_term, cfg.retain_weight));
    return bundle;
}

}  // namespace ulab::unlearn
