#pragma once

// Evaluation over candidate-restricted answer distributions: the binary
// memorization check, the accuracy metric suite with its two derived scores,
// and the per-cluster superficiality classifier that compares a model before
// and after unlearning.
//
// Evaluation is expressed against an AnswerFn rather than a concrete model,
// so the classifier and metrics can be exercised with synthetic scorers.

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ulab/microlm.hpp"
#include "ulab/worldgen.hpp"

namespace ulab::eval {

// Renormalized candidate probabilities for a question, aligned with the
// candidate order it is given.
using AnswerFn =
    std::function<std::vector<double>(const std::vector<int>&, std::span<const int>)>;

template <class S>
AnswerFn model_answer_fn(const lm::ModelState<S>& model) {
    return [&model](const std::vector<int>& question, std::span<const int> candidates) {
        auto probs = lm::answer_distribution(model, question, candidates);
        std::vector<double> out;
        out.reserve(candidates.size());
        for (int c : candidates) out.push_back(probs.at(c));
        return out;
    };
}

// 1 iff the argmax over candidates is the gold answer; exact ties resolve to
// the lowest token id.
int memorization(const AnswerFn& fn, const std::vector<int>& question,
                 std::span<const int> candidates, int answer);
int memorization(const AnswerFn& fn, const world::QAItem& item);

struct ItemOutcome {
    std::string id;
    world::ItemKind kind = world::ItemKind::base;
    int cluster_id = 0;
    int before = 0;
    int after = 0;

    bool operator==(const ItemOutcome&) const = default;
};

struct EvalReport {
    std::string method;
    std::optional<double> ua;         // forget base accuracy, after
    std::optional<double> ua_ext;     // forget paraphrase accuracy, after
    std::optional<double> ta;         // test base accuracy, after
    std::optional<double> sa;         // shared-answer accuracy, after
    std::optional<double> sa_forget;  // ... restricted to forget clusters
    std::optional<double> sa_test;    // ... restricted to test clusters
    std::optional<double> ma_f;       // two-hop accuracy on forget clusters
    std::optional<double> ma_t;       // two-hop accuracy on test clusters
    std::optional<double> ma;
    std::optional<double> score;
    std::vector<ItemOutcome> items;

    bool operator==(const EvalReport&) const = default;
};

double ma_from(double ma_f, double ma_t);
double score_from(double ua_ext, double ta, double sa, double ma);

// Accuracies on the 0-100 scale over the metric sets drawn from forget and
// test clusters. With allow_partial=false an empty metric set is an error
// (the total score would be undefined); with allow_partial=true the affected
// metrics and the score stay absent.
EvalReport metric_suite(const AnswerFn& before, const AnswerFn& after, const world::Dataset& ds,
                        const world::Splits& splits, bool allow_partial = false);

struct SuperficialVerdict {
    int cluster_id = 0;
    std::vector<std::string> condition1_hits;  // interconnected items still memorized
    std::vector<std::string> condition2_hits;  // disjoint same-answer items erased
    bool is_superficial = false;

    bool operator==(const SuperficialVerdict&) const = default;
};

// Per forget cluster: a two-hop item whose knowledge overlaps the union of
// forgotten knowledge and is still memorized fires condition 1; a
// shared-answer item with disjoint knowledge that flipped to forgotten fires
// condition 2. Items not memorized before unlearning are excluded. Overlap
// and disjointness are computed from the knowledge sets, not assumed.
std::vector<SuperficialVerdict> classify_superficial(const AnswerFn& before, const AnswerFn& after,
                                                     const std::vector<world::Cluster>& clusters,
                                                     std::span<const int> forget_ids);

}  // namespace ulab::eval
