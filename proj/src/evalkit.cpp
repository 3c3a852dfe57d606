#include "ulab/evalkit.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "ulab/errors.hpp"

namespace ulab::eval {

int memorization(const AnswerFn& fn, const std::vector<int>& question,
                 std::span<const int> candidates, int answer) {
    const auto probs = fn(question, candidates);
    if (probs.size() != candidates.size())
        throw ConfigError("memorization: scorer returned wrong arity");
    double best_p = probs[0];
    int best_token = candidates[0];
    for (size_t i = 1; i < candidates.size(); ++i) {
        if (probs[i] > best_p || (probs[i] == best_p && candidates[i] < best_token)) {
            best_p = probs[i];
            best_token = candidates[i];
        }
    }
    return best_token == answer ? 1 : 0;
}

int memorization(const AnswerFn& fn, const world::QAItem& item) {
    return memorization(fn, item.question, item.candidates, item.answer);
}

double ma_from(double ma_f, double ma_t) { return ((100.0 - ma_f) + ma_t) / 2.0; }

double score_from(double ua_ext, double ta, double sa, double ma) {
    return ((100.0 - ua_ext) + ta + sa + ma) / 4.0;
}

namespace {

struct Accumulator {
    int hits = 0;
    int total = 0;

    void add(int mem) {
        hits += mem;
        ++total;
    }
    std::optional<double> accuracy() const {
        if (total == 0) return std::nullopt;
        return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
    }
};

}  // namespace

EvalReport metric_suite(const AnswerFn& before, const AnswerFn& after, const world::Dataset& ds,
                        const world::Splits& splits, bool allow_partial) {
    const std::set<int> forget(splits.forget.begin(), splits.forget.end());
    const std::set<int> test(splits.test.begin(), splits.test.end());

    EvalReport report;
    Accumulator ua, ua_ext, ta, sa_f, sa_t, ma_f, ma_t;

    for (const world::Cluster& c : ds.clusters) {
        const bool in_forget = forget.count(c.base.cluster_id) > 0;
        const bool in_test = test.count(c.base.cluster_id) > 0;
        for (const world::QAItem* item : c.all_items()) {
            ItemOutcome outcome{item->id, item->kind, item->cluster_id,
                                memorization(before, *item), memorization(after, *item)};
            if (in_forget) {
                switch (item->kind) {
                    case world::ItemKind::base: ua.add(outcome.after); break;
                    case world::ItemKind::paraphrased: ua_ext.add(outcome.after); break;
                    case world::ItemKind::multihop: ma_f.add(outcome.after); break;
                    case world::ItemKind::same_answer: sa_f.add(outcome.after); break;
                }
            } else if (in_test) {
                switch (item->kind) {
                    case world::ItemKind::base: ta.add(outcome.after); break;
                    case world::ItemKind::multihop: ma_t.add(outcome.after); break;
                    case world::ItemKind::same_answer: sa_t.add(outcome.after); break;
                    case world::ItemKind::paraphrased: break;  // scored in no metric
                }
            }
            report.items.push_back(std::move(outcome));
        }
    }

    report.ua = ua.accuracy();
    report.ua_ext = ua_ext.accuracy();
    report.ta = ta.accuracy();
    report.sa_forget = sa_f.accuracy();
    report.sa_test = sa_t.accuracy();
    Accumulator sa_all;
    sa_all.hits = sa_f.hits + sa_t.hits;
    sa_all.total = sa_f.total + sa_t.total;
    report.sa = sa_all.accuracy();
    report.ma_f = ma_f.accuracy();
    report.ma_t = ma_t.accuracy();
    if (report.ma_f && report.ma_t) report.ma = ma_from(*report.ma_f, *report.ma_t);
    if (report.ua_ext && report.ta && report.sa && report.ma)
        report.score = score_from(*report.ua_ext, *report.ta, *report.sa, *report.ma);

    if (!allow_partial && !report.score) {
        std::string missing;
        auto note = [&missing](const char* name, const auto& opt) {
            if (!opt) missing += std::string(missing.empty() ? "" : ", ") + name;
        };
        note("UA_ext", report.ua_ext);
        note("TA", report.ta);
        note("SA", report.sa);
        note("MA_f", report.ma_f);
        note("MA_t", report.ma_t);
        throw ConfigError("metric_suite: score undefined, empty metric sets: " + missing);
    }
    return report;
}

std::vector<SuperficialVerdict> classify_superficial(const AnswerFn& before, const AnswerFn& after,
                                                     const std::vector<world::Cluster>& clusters,
                                                     std::span<const int> forget_ids) {
    std::map<int, const world::Cluster*> by_id;
    for (const auto& c : clusters) by_id[c.base.cluster_id] = &c;

    // union of the forgotten knowledge across the whole forget set
    std::set<world::Triple> kappa_f;
    for (int id : forget_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw ConfigError("classify_superficial: unknown forget cluster " + std::to_string(id));
        for (const auto& t : it->second->base.knowledge) kappa_f.insert(t);
    }

    auto overlaps = [&kappa_f](const std::vector<world::Triple>& knowledge) {
        return std::any_of(knowledge.begin(), knowledge.end(),
                           [&](const world::Triple& t) { return kappa_f.count(t) > 0; });
    };

    std::vector<SuperficialVerdict> verdicts;
    for (int id : forget_ids) {
        const world::Cluster& c = *by_id.at(id);
        SuperficialVerdict v;
        v.cluster_id = id;
        for (const auto& item : c.multihops) {
            if (!overlaps(item.knowledge)) continue;  // condition 1 needs shared knowledge
            if (memorization(before, item) == 1 && memorization(after, item) == 1)
                v.condition1_hits.push_back(item.id);
        }
        for (const auto& item : c.same_answers) {
            if (overlaps(item.knowledge)) continue;  // condition 2 needs disjoint knowledge
            if (memorization(before, item) == 1 && memorization(after, item) == 0)
                v.condition2_hits.push_back(item.id);
        }
        v.is_superficial = !v.condition1_hits.empty() || !v.condition2_hits.empty();
        verdicts.push_back(std::move(v));
    }
    return verdicts;
}

}  // namespace ulab::eval
