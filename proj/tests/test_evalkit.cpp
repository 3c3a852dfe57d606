#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "ulab/evalkit.hpp"
#include "ulab/report_io.hpp"
#include "ulab/rng.hpp"
#include "ulab/worldgen.hpp"

using namespace ulab;
using namespace ulab::eval;
using namespace ulab::world;

namespace {

GenParams small_params(uint64_t seed = 3) {
    GenParams p;
    p.seed = seed;
    p.n_famous = 24;
    p.n_background = 160;
    p.n_relations = 6;
    p.obj_pool_size = 8;
    p.max_triples_per_famous = 3;
    p.chain_density = 0.6;
    p.same_answer_max = 4;
    p.frac_forget = 0.10;
    p.frac_retain = 0.15;
    p.frac_test = 0.60;
    return p;
}

// Scores 1.0 for the gold answer of every known question except those whose
// ids were marked "forgotten"; those get the mass on the first distractor.
AnswerFn oracle_scorer(const Dataset& ds, const std::set<std::string>& forgotten) {
    std::map<std::vector<int>, std::pair<int, bool>> table;  // question -> (gold, forgotten)
    for (const auto& c : ds.clusters)
        for (const QAItem* item : c.all_items())
            table[item->question] = {item->answer, forgotten.count(item->id) > 0};
    return [table](const std::vector<int>& q, std::span<const int> cand) {
        std::vector<double> out(cand.size(), 0.0);
        const auto it = table.find(q);
        if (it == table.end()) {
            out[0] = 1.0;
            return out;
        }
        const auto [gold, forget] = it->second;
        int winner = -1;
        if (!forget) {
            winner = gold;
        } else {
            for (int c : cand)
                if (c != gold) {
                    winner = c;
                    break;
                }
        }
        for (size_t i = 0; i < cand.size(); ++i)
            if (cand[i] == winner) out[i] = 1.0;
        return out;
    };
}

// Deterministic pseudo-random scorer, fixed by (question, candidate).
AnswerFn hash_scorer(uint64_t salt) {
    return [salt](const std::vector<int>& q, std::span<const int> cand) {
        uint64_t h = salt;
        for (int t : q) h = splitmix64(h ^ static_cast<uint64_t>(t));
        std::vector<double> out;
        double sum = 0.0;
        for (int c : cand) {
            const double v =
                static_cast<double>(splitmix64(h ^ static_cast<uint64_t>(c)) >> 11) * 0x1.0p-53;
            out.push_back(v);
            sum += v;
        }
        for (auto& v : out) v /= sum;
        return out;
    };
}

}  // namespace

TEST_CASE("memorization: forced singleton and tie-breaking") {
    AnswerFn uniform = [](const std::vector<int>&, std::span<const int> cand) {
        return std::vector<double>(cand.size(), 1.0 / static_cast<double>(cand.size()));
    };
    const std::vector<int> q{1, 2};

    CHECK(memorization(uniform, q, std::vector<int>{7}, 7) == 1);

    // exact three-way tie: the lowest token id wins
    CHECK(memorization(uniform, q, std::vector<int>{9, 4, 6}, 4) == 1);
    CHECK(memorization(uniform, q, std::vector<int>{9, 4, 6}, 9) == 0);
}

TEST_CASE("score arithmetic reproduces the published rows") {
    // two rows of the reference score table, reproduced from their components
    CHECK(std::abs(score_from(36.70, 82.97, 74.69, 58.16) - 69.78) < 0.005);
    CHECK(std::abs(score_from(34.01, 77.58, 66.51, 53.21) - 65.82) < 0.005);

    CHECK(ma_from(0.0, 100.0) == doctest::Approx(100.0).epsilon(1e-12));

    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const double f = rng.uniform(0, 100), t = rng.uniform(0, 100);
        CHECK(std::abs(ma_from(f, t) - (((100.0 - f) + t) / 2.0)) < 1e-9);
    }
}

TEST_CASE("identity run reports the pre-unlearning accuracies") {
    const auto ds = synthesize(small_params());
    auto fn = oracle_scorer(ds, {});
    auto report = metric_suite(fn, fn, ds, ds.splits);
    CHECK(report.ua == doctest::Approx(100.0));
    CHECK(report.ua_ext == doctest::Approx(100.0));
    CHECK(report.ta == doctest::Approx(100.0));
    CHECK(report.sa == doctest::Approx(100.0));
    CHECK(report.ma_f == doctest::Approx(100.0));
    CHECK(report.ma_t == doctest::Approx(100.0));
    CHECK(*report.ma == doctest::Approx(ma_from(100.0, 100.0)));
    CHECK(*report.score == doctest::Approx(score_from(100.0, 100.0, 100.0, *report.ma)));

    // the report's own identities, recomputed
    CHECK(std::abs(*report.ma - ma_from(*report.ma_f, *report.ma_t)) < 1e-9);
    CHECK(std::abs(*report.score - score_from(*report.ua_ext, *report.ta, *report.sa, *report.ma)) <
          1e-9);
}

TEST_CASE("metric accuracy equals a naive per-item recount") {
    const auto ds = synthesize(small_params(7));
    auto before = hash_scorer(1);
    auto after = hash_scorer(2);
    auto report = metric_suite(before, after, ds, ds.splits);

    const std::set<int> forget(ds.splits.forget.begin(), ds.splits.forget.end());
    const std::set<int> test(ds.splits.test.begin(), ds.splits.test.end());
    auto recount = [&](ItemKind kind, const std::set<int>& ids) {
        int hits = 0, total = 0;
        for (const auto& item : report.items) {
            if (item.kind != kind || !ids.count(item.cluster_id)) continue;
            hits += item.after;
            ++total;
        }
        return 100.0 * hits / std::max(1, total);
    };
    CHECK(*report.ua == doctest::Approx(recount(ItemKind::base, forget)).epsilon(1e-12));
    CHECK(*report.ua_ext == doctest::Approx(recount(ItemKind::paraphrased, forget)).epsilon(1e-12));
    CHECK(*report.ta == doctest::Approx(recount(ItemKind::base, test)).epsilon(1e-12));
    CHECK(*report.ma_f == doctest::Approx(recount(ItemKind::multihop, forget)).epsilon(1e-12));
    CHECK(*report.ma_t == doctest::Approx(recount(ItemKind::multihop, test)).epsilon(1e-12));

    // per-item table covers every item exactly once
    std::set<std::string> ids;
    size_t n_items = 0;
    for (const auto& c : ds.clusters) n_items += c.all_items().size();
    for (const auto& item : report.items) CHECK(ids.insert(item.id).second);
    CHECK(ids.size() == n_items);
}

TEST_CASE("empty metric sets: error by default, absent when partial allowed") {
    auto p = small_params();
    p.chain_density = 0.0;  // no two-hop items anywhere
    const auto ds = synthesize(p);
    auto fn = oracle_scorer(ds, {});
    CHECK_THROWS_AS(metric_suite(fn, fn, ds, ds.splits), ConfigError);

    auto report = metric_suite(fn, fn, ds, ds.splits, /*allow_partial=*/true);
    CHECK_FALSE(report.ma_f.has_value());
    CHECK_FALSE(report.ma.has_value());
    CHECK_FALSE(report.score.has_value());
    CHECK(report.ua.has_value());
}

TEST_CASE("superficiality classifier on hand-built scenarios") {
    const auto ds = synthesize(small_params(11));
    REQUIRE_FALSE(ds.splits.forget.empty());

    // pick a forget cluster that has both item kinds
    const Cluster* target = nullptr;
    for (int id : ds.splits.forget) {
        const Cluster* c = ds.cluster_by_id(id);
        if (!c->multihops.empty() && !c->same_answers.empty()) target = c;
    }
    REQUIRE(target != nullptr);
    const int tid = target->base.cluster_id;

    auto before = oracle_scorer(ds, {});
    auto forget_ids = ds.splits.forget;

    SUBCASE("faithful unlearning raises no verdict") {
        std::set<std::string> gone{target->base.id};
        for (const auto& i : target->paraphrases) gone.insert(i.id);
        for (const auto& i : target->multihops) gone.insert(i.id);
        auto after = oracle_scorer(ds, gone);
        for (const auto& v : classify_superficial(before, after, ds.clusters, forget_ids)) {
            if (v.cluster_id != tid) continue;
            CHECK_FALSE(v.is_superficial);
            CHECK(v.condition1_hits.empty());
            CHECK(v.condition2_hits.empty());
        }
    }

    SUBCASE("retained two-hop knowledge fires condition 1") {
        std::set<std::string> gone{target->base.id};  // two-hop items stay memorized
        auto after = oracle_scorer(ds, gone);
        for (const auto& v : classify_superficial(before, after, ds.clusters, forget_ids)) {
            if (v.cluster_id != tid) continue;
            CHECK(v.is_superficial);
            CHECK(v.condition1_hits.size() == target->multihops.size());
        }
    }

    SUBCASE("erased disjoint same-answer knowledge fires condition 2") {
        std::set<std::string> gone{target->base.id};
        for (const auto& i : target->multihops) gone.insert(i.id);
        gone.insert(target->same_answers[0].id);
        auto after = oracle_scorer(ds, gone);
        for (const auto& v : classify_superficial(before, after, ds.clusters, forget_ids)) {
            if (v.cluster_id != tid) continue;
            CHECK(v.is_superficial);
            CHECK(v.condition1_hits.empty());
            REQUIRE(v.condition2_hits.size() == 1);
            CHECK(v.condition2_hits[0] == target->same_answers[0].id);
        }
    }

    SUBCASE("items not memorized before unlearning are excluded") {
        // make the before-model ignorant of the same-answer item, then erase it
        std::set<std::string> never{target->same_answers[0].id};
        auto before2 = oracle_scorer(ds, never);
        std::set<std::string> gone = never;
        gone.insert(target->base.id);
        for (const auto& i : target->multihops) gone.insert(i.id);
        auto after = oracle_scorer(ds, gone);
        for (const auto& v : classify_superficial(before2, after, ds.clusters, forget_ids)) {
            if (v.cluster_id != tid) continue;
            CHECK(v.condition2_hits.empty());
        }
    }
}

TEST_CASE("classifier monotonicity in retained two-hop items") {
    const auto ds = synthesize(small_params(11));
    const Cluster* target = nullptr;
    for (int id : ds.splits.forget) {
        const Cluster* c = ds.cluster_by_id(id);
        if (c->multihops.size() >= 2) target = c;
    }
    if (target == nullptr) return;  // world too small for this scenario

    auto before = oracle_scorer(ds, {});
    // condition 2 already fires; re-memorizing a two-hop item must keep it superficial
    std::set<std::string> gone{target->base.id, target->same_answers.empty()
                                                    ? target->multihops[1].id
                                                    : target->same_answers[0].id};
    for (const auto& i : target->multihops) gone.insert(i.id);
    auto after_all = oracle_scorer(ds, gone);
    auto gone_minus = gone;
    gone_minus.erase(target->multihops[0].id);  // one two-hop item stays memorized
    auto after_retained = oracle_scorer(ds, gone_minus);

    auto find = [&](const std::vector<SuperficialVerdict>& vs) {
        for (const auto& v : vs)
            if (v.cluster_id == target->base.cluster_id) return v;
        return SuperficialVerdict{};
    };
    const auto v_all = find(classify_superficial(before, after_all, ds.clusters, ds.splits.forget));
    const auto v_ret =
        find(classify_superficial(before, after_retained, ds.clusters, ds.splits.forget));
    CHECK(v_ret.condition1_hits.size() >= v_all.condition1_hits.size());
    if (v_all.is_superficial) CHECK(v_ret.is_superficial);
}

TEST_CASE("report files round-trip and render two decimals") {
    const auto ds = synthesize(small_params(13));
    auto before = oracle_scorer(ds, {});
    std::set<std::string> gone;
    for (int id : ds.splits.forget) {
        const Cluster* c = ds.cluster_by_id(id);
        gone.insert(c->base.id);
    }
    auto after = oracle_scorer(ds, gone);
    auto report = metric_suite(before, after, ds, ds.splits);
    report.method = "oracle";
    auto verdicts = classify_superficial(before, after, ds.clusters, ds.splits.forget);

    auto dir = std::filesystem::temp_directory_path() / "ulab_evalkit_tests";
    std::filesystem::create_directories(dir);
    emit_report(report, verdicts, dir / "report.jsonl", dir / "report.csv");

    const auto stored = read_report(dir / "report.jsonl");
    CHECK(stored.report == report);
    CHECK(stored.verdicts == verdicts);

    std::ifstream csv(dir / "report.csv");
    std::string header, row;
    std::getline(csv, header);
    std::getline(csv, row);
    CHECK(header == "method,UA,UA_ext,TA,SA,MA_f,MA_t,MA,Score");
    CHECK(row.substr(0, 7) == "oracle,");
    CHECK(row.find("0.00") != std::string::npos);  // UA of a fully erased forget set

    // degenerate: no verdicts still yields a valid file
    emit_report(report, {}, dir / "empty.jsonl", dir / "empty.csv");
    CHECK(read_report(dir / "empty.jsonl").verdicts.empty());
}
