#pragma once

// Neuron attribution for the answer probability: per FFN hidden unit, the
// activation-times-gradient contribution max-pooled over prompt positions,
// averaged over a batch. Regularization subtracts the scaled mean of
// negativity-clipped attributions computed from mismatched question-answer
// pairs, suppressing units that push the answer token regardless of context.

#include <cstdint>
#include <string>
#include <vector>

#include "ulab/errors.hpp"
#include "ulab/microlm.hpp"
#include "ulab/neuron_mask.hpp"

namespace ulab::unlearn {

struct QuestionAnswer {
    std::vector<int> question;
    int answer = 0;
    std::string id;
};

struct AttributionMap {
    int n_layers = 0;
    int d_ffn = 0;
    std::vector<double> scores;  // (layer, neuron) row-major
    bool regularized = false;
    std::vector<std::string> batch_ids;

    static AttributionMap zeros(int n_layers, int d_ffn) {
        AttributionMap m;
        m.n_layers = n_layers;
        m.d_ffn = d_ffn;
        m.scores.assign(static_cast<size_t>(n_layers) * d_ffn, 0.0);
        return m;
    }

    double& at(int layer, int neuron) {
        return scores[static_cast<size_t>(layer) * d_ffn + neuron];
    }
    double at(int layer, int neuron) const {
        return scores[static_cast<size_t>(layer) * d_ffn + neuron];
    }
    int64_t total() const { return static_cast<int64_t>(scores.size()); }

    uint64_t content_hash() const;
};

// Elementwise mean of equally-shaped maps.
AttributionMap mean_maps(const std::vector<AttributionMap>& maps);

// I = base - alpha * (1/N) * sum_i clip(mismatched_i), clip zeroing negatives.
// N is the number of mismatched maps; with none, the base passes through.
AttributionMap apply_regularization(const AttributionMap& base,
                                    const std::vector<AttributionMap>& mismatched, double alpha);

// Global descending sort over all (layer, neuron) scores, ties broken by
// ascending index; keeps ceil(p * total). p = 0 selects nothing.
NeuronMask select_neurons(const AttributionMap& attr, double p);

// One item's attribution: forward with parameters constant, backward from the
// full-vocabulary answer probability, then h * dP/dh max-pooled over prompt
// token positions. Parameter gradients are untouched.
template <class S>
AttributionMap attribute_one(const lm::ModelState<S>& model, const QuestionAnswer& qa) {
    AttributionMap map = AttributionMap::zeros(model.cfg.n_layers, model.cfg.d_ffn);
    ag::GradTape<S> tape;
    auto graph = lm::answer_prob_graph(model, qa.question, qa.answer);
    tape.backward(graph.prob);

    const int L = static_cast<int>(qa.question.size());
    const int d_ffn = model.cfg.d_ffn;
    for (int l = 0; l < model.cfg.n_layers; ++l) {
        const auto& act = graph.acts.at(l);
        const auto& h = act.values();
        const auto& g = act.grad();
        for (int i = 0; i < d_ffn; ++i) {
            double best = -std::numeric_limits<double>::infinity();
            for (int t = 0; t < L; ++t) {
                const size_t idx = static_cast<size_t>(t) * d_ffn + i;
                best = std::max(best, static_cast<double>(h[idx]) * static_cast<double>(g[idx]));
            }
            map.at(l, i) = best;
        }
    }
    map.batch_ids.push_back(qa.id);
    return map;
}

// Mean attribution over a batch of question-answer pairs.
template <class S>
AttributionMap attribute(const lm::ModelState<S>& model, const std::vector<QuestionAnswer>& batch) {
    if (batch.empty()) throw ConfigError("attribute: empty batch");
    std::vector<AttributionMap> maps;
    maps.reserve(batch.size());
    for (const auto& qa : batch) maps.push_back(attribute_one(model, qa));
    AttributionMap out = mean_maps(maps);
    for (const auto& qa : batch) out.batch_ids.push_back(qa.id);
    return out;
}

// Eq-style regularization against mismatched pairs evaluated on the model:
// each pair shares the target answer but carries an unrelated question.
template <class S>
AttributionMap regularize(const AttributionMap& base, const lm::ModelState<S>& model,
                          const std::vector<QuestionAnswer>& mismatched, double alpha) {
    if (alpha < 0) throw ConfigError("regularize: alpha must be non-negative");
    std::vector<AttributionMap> maps;
    maps.reserve(mismatched.size());
    for (const auto& qa : mismatched) maps.push_back(attribute_one(model, qa));
    return apply_regularization(base, maps, alpha);
}

}  // namespace ulab::unlearn
