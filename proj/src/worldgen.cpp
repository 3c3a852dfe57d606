#include "ulab/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "ulab/errors.hpp"
#include "ulab/rng.hpp"

namespace ulab::world {

namespace {

std::string format_id(const char* fmt, int a, int b = -1) {
    char buf[64];
    if (b >= 0)
        std::snprintf(buf, sizeof(buf), fmt, a, b);
    else
        std::snprintf(buf, sizeof(buf), fmt, a);
    return buf;
}

}  // namespace

std::optional<int> KnowledgeGraph::object_of(int s, int r) const {
    const Triple probe{s, r, 0};
    auto it = std::lower_bound(triples.begin(), triples.end(), probe,
                               [](const Triple& a, const Triple& b) {
                                   return std::pair(a.s, a.r) < std::pair(b.s, b.r);
                               });
    if (it != triples.end() && it->s == s && it->r == r) return it->o;
    return std::nullopt;
}

std::vector<Triple> KnowledgeGraph::outgoing(int s) const {
    std::vector<Triple> out;
    auto it = std::lower_bound(triples.begin(), triples.end(), Triple{s, 0, 0});
    for (; it != triples.end() && it->s == s; ++it) out.push_back(*it);
    return out;
}

const char* kind_name(ItemKind k) {
    switch (k) {
        case ItemKind::base: return "base";
        case ItemKind::paraphrased: return "paraphrased";
        case ItemKind::multihop: return "multihop";
        case ItemKind::same_answer: return "same_answer";
    }
    return "?";
}

ItemKind kind_from_name(const std::string& name) {
    if (name == "base") return ItemKind::base;
    if (name == "paraphrased") return ItemKind::paraphrased;
    if (name == "multihop") return ItemKind::multihop;
    if (name == "same_answer") return ItemKind::same_answer;
    throw DataError("unknown item kind '" + name + "'");
}

std::string entity_token(const KnowledgeGraph& g, int entity) {
    if (g.is_famous(entity)) return format_id("P%03d", entity);
    return format_id("B%04d", entity - g.n_famous);
}

std::string relation_marker(int relation, int variant) {
    return format_id("Q_R%02d_V%d", relation, variant);
}

int Vocab::require(const std::string& name) const {
    auto it = id_of.find(name);
    if (it == id_of.end()) throw DataError("token '" + name + "' not in vocab");
    return it->second;
}

// ---------------------------------------------------------------------------

KnowledgeGraph generate_graph(const GenParams& p) {
    if (p.n_famous < 1) throw ConfigError("generate_graph: n_famous must be >= 1");
    if (p.n_relations < 1) throw ConfigError("generate_graph: n_relations must be >= 1");
    if (p.obj_pool_size < 1) throw ConfigError("generate_graph: obj_pool_size must be >= 1");
    if (p.max_triples_per_famous < 1)
        throw ConfigError("generate_graph: max_triples_per_famous must be >= 1");
    if (p.chain_density < 0.0 || p.chain_density > 1.0)
        throw ConfigError("generate_graph: chain_density must lie in [0,1]");
    if (p.max_chains_per_object < 0 || p.same_answer_max < 0)
        throw ConfigError("generate_graph: negative count");
    const int n_objects = p.n_relations * p.obj_pool_size;
    if (p.n_background <= n_objects)
        throw ConfigError("generate_graph: n_background leaves no shared-answer subjects (need > " +
                          std::to_string(n_objects) + ")");

    KnowledgeGraph g;
    g.n_famous = p.n_famous;
    g.n_background = p.n_background;
    g.n_relations = p.n_relations;
    g.obj_pool_size = p.obj_pool_size;

    Rng rng(derive_seed(p.seed, "world/graph"));

    // facts about famous subjects
    std::vector<int> relations(static_cast<size_t>(p.n_relations));
    for (int r = 0; r < p.n_relations; ++r) relations[static_cast<size_t>(r)] = r;
    std::vector<Triple> famous_triples;
    for (int s = 0; s < p.n_famous; ++s) {
        const int k = static_cast<int>(
            rng.randint(1, std::min(p.max_triples_per_famous, p.n_relations)));
        std::vector<int> rel = relations;
        rng.shuffle(rel);
        for (int i = 0; i < k; ++i) {
            const int r = rel[static_cast<size_t>(i)];
            const int o = g.pool_begin(r) + static_cast<int>(rng.randint(0, p.obj_pool_size - 1));
            famous_triples.push_back({s, r, o});
        }
    }

    // outgoing facts from a fraction of object entities, enabling 2-hop chains
    std::vector<Triple> chain_triples;
    for (int e = g.pool_begin(0); e < g.pool_end(p.n_relations - 1); ++e) {
        if (rng.uniform() >= p.chain_density) continue;
        const int c = p.max_chains_per_object < 1
                          ? 0
                          : static_cast<int>(rng.randint(1, std::min(p.max_chains_per_object,
                                                                     p.n_relations)));
        std::vector<int> rel = relations;
        rng.shuffle(rel);
        for (int i = 0; i < c; ++i) {
            const int r2 = rel[static_cast<size_t>(i)];
            int idx = static_cast<int>(rng.randint(0, p.obj_pool_size - 1));
            int o2 = g.pool_begin(r2) + idx;
            if (o2 == e) {  // no self loops
                if (p.obj_pool_size == 1) continue;
                o2 = g.pool_begin(r2) + (idx + 1) % p.obj_pool_size;
            }
            chain_triples.push_back({e, r2, o2});
        }
    }

    // shared-object facts with background subjects, drawn per famous fact in
    // canonical order from per-relation shuffled subject queues
    std::sort(famous_triples.begin(), famous_triples.end());
    const int sa_begin = p.n_famous + n_objects;
    const int sa_count = g.n_entities() - sa_begin;
    std::vector<int> sa_subjects(static_cast<size_t>(sa_count));
    for (int i = 0; i < sa_count; ++i) sa_subjects[static_cast<size_t>(i)] = sa_begin + i;
    std::vector<std::vector<int>> queue(static_cast<size_t>(p.n_relations));
    std::vector<size_t> cursor(static_cast<size_t>(p.n_relations), 0);
    for (int r = 0; r < p.n_relations; ++r) {
        queue[static_cast<size_t>(r)] = sa_subjects;
        rng.shuffle(queue[static_cast<size_t>(r)]);
    }
    std::vector<Triple> sa_triples;
    for (const Triple& t : famous_triples) {
        int m = p.same_answer_max < 1 ? 0 : static_cast<int>(rng.randint(0, p.same_answer_max));
        auto& q = queue[static_cast<size_t>(t.r)];
        auto& cur = cursor[static_cast<size_t>(t.r)];
        m = std::min<int>(m, static_cast<int>(q.size() - cur));  // graceful pool exhaustion
        for (int i = 0; i < m; ++i) sa_triples.push_back({q[cur++], t.r, t.o});
    }

    g.triples = std::move(famous_triples);
    g.triples.insert(g.triples.end(), chain_triples.begin(), chain_triples.end());
    g.triples.insert(g.triples.end(), sa_triples.begin(), sa_triples.end());
    std::sort(g.triples.begin(), g.triples.end());
    return g;
}

// ---------------------------------------------------------------------------

namespace {

struct ClusterPlan {
    Triple base;
    std::vector<Triple> chains;       // (base.o, r2, o2)
    std::vector<Triple> same_answer;  // (s', base.r, base.o)
};

std::array<int, 3> draw_candidates(const KnowledgeGraph& g, const Vocab& vocab, int relation,
                                   int gold_entity, Rng& rng) {
    // two distinct distractors from the relation's object pool, then a seeded
    // shuffle fixes the display order once and for all
    const int pool = g.obj_pool_size;
    int d1 = g.pool_begin(relation) + static_cast<int>(rng.randint(0, pool - 1));
    while (d1 == gold_entity)
        d1 = g.pool_begin(relation) + static_cast<int>(rng.randint(0, pool - 1));
    int d2 = g.pool_begin(relation) + static_cast<int>(rng.randint(0, pool - 1));
    while (d2 == gold_entity || d2 == d1)
        d2 = g.pool_begin(relation) + static_cast<int>(rng.randint(0, pool - 1));

    std::vector<int> order{vocab.require(entity_token(g, gold_entity)),
                           vocab.require(entity_token(g, d1)),
                           vocab.require(entity_token(g, d2))};
    rng.shuffle(order);
    return {order[0], order[1], order[2]};
}

}  // namespace

BuildResult build_clusters(const KnowledgeGraph& g, int templates_per_relation, uint64_t seed) {
    if (templates_per_relation < 4)
        throw ConfigError("build_clusters: at least 4 surface templates per relation required");

    BuildResult out;

    // plan pass: decide which base triples become clusters and what maps to them
    std::map<int, std::vector<Triple>> outgoing;   // subject -> chain triples
    std::map<int, std::vector<Triple>> sa_by_obj;  // object -> shared-answer triples
    std::vector<Triple> bases;
    for (const Triple& t : g.triples) {
        if (g.is_famous(t.s)) {
            bases.push_back(t);
        } else if (g.pool_relation(t.s) >= 0) {
            outgoing[t.s].push_back(t);
        } else {
            sa_by_obj[t.o].push_back(t);
        }
    }

    std::map<int, std::vector<size_t>> bases_by_obj;  // object -> base indices
    for (size_t i = 0; i < bases.size(); ++i) bases_by_obj[bases[i].o].push_back(i);

    std::vector<ClusterPlan> plans(bases.size());
    for (size_t i = 0; i < bases.size(); ++i) {
        plans[i].base = bases[i];
        if (auto it = outgoing.find(bases[i].o); it != outgoing.end()) plans[i].chains = it->second;
    }
    // round-robin shared-answer facts across the clusters that share the object
    for (auto& [obj, triples] : sa_by_obj) {
        auto it = bases_by_obj.find(obj);
        if (it == bases_by_obj.end()) continue;
        const auto& owners = it->second;
        for (size_t j = 0; j < triples.size(); ++j)
            plans[owners[j % owners.size()]].same_answer.push_back(triples[j]);
    }

    std::vector<const ClusterPlan*> emitted;
    for (const auto& plan : plans) {
        if (g.obj_pool_size < 3) {
            out.warnings.push_back("relation " + std::to_string(plan.base.r) +
                                   " has fewer than 3 objects; cluster for subject " +
                                   std::to_string(plan.base.s) + " skipped");
            continue;
        }
        if (plan.chains.empty() && plan.same_answer.empty()) continue;  // interconnection filter
        emitted.push_back(&plan);
    }

    // vocab: terminal + reserved rejection answer + relation surface markers +
    // every entity that can appear in a question, answer, or candidate list
    Vocab& vocab = out.vocab;
    auto add_token = [&vocab](const std::string& name) {
        vocab.id_of.emplace(name, vocab.size());
        vocab.tokens.push_back(name);
    };
    add_token(kQEndToken);
    add_token(kRejectToken);
    for (int r = 0; r < g.n_relations; ++r)
        for (int v = 0; v < 4; ++v) add_token(relation_marker(r, v));
    std::set<int> used_entities;
    for (const ClusterPlan* plan : emitted) {
        used_entities.insert(plan->base.s);
        for (const Triple& c : plan->chains) used_entities.insert(c.s);
        for (const Triple& s : plan->same_answer) used_entities.insert(s.s);
    }
    for (int r = 0; r < g.n_relations; ++r)
        for (int e = g.pool_begin(r); e < g.pool_end(r); ++e) used_entities.insert(e);
    for (int e : used_entities) add_token(entity_token(g, e));

    // item pass
    Rng rng(derive_seed(seed, "world/clusters"));
    const int qend = vocab.require(kQEndToken);
    auto marker = [&](int r, int v) { return vocab.require(relation_marker(r, v)); };
    auto ent = [&](int e) { return vocab.require(entity_token(g, e)); };

    int cluster_id = 0;
    for (const ClusterPlan* plan : emitted) {
        const Triple base = plan->base;
        Cluster cluster;

        const auto base_cand = draw_candidates(g, vocab, base.r, base.o, rng);
        cluster.base = QAItem{format_id("c%04d.base", cluster_id),
                              ItemKind::base,
                              {marker(base.r, 0), ent(base.s), qend},
                              ent(base.o),
                              base_cand,
                              {base},
                              cluster_id};
        for (int v = 1; v < 4; ++v) {
            cluster.paraphrases.push_back(QAItem{format_id("c%04d.p%d", cluster_id, v - 1),
                                                 ItemKind::paraphrased,
                                                 {marker(base.r, v), ent(base.s), qend},
                                                 ent(base.o),
                                                 base_cand,
                                                 {base},
                                                 cluster_id});
        }
        int j = 0;
        for (const Triple& chain : plan->chains) {
            cluster.multihops.push_back(QAItem{format_id("c%04d.mh%d", cluster_id, j++),
                                               ItemKind::multihop,
                                               {marker(chain.r, 0), marker(base.r, 0), ent(base.s), qend},
                                               ent(chain.o),
                                               draw_candidates(g, vocab, chain.r, chain.o, rng),
                                               {base, chain},
                                               cluster_id});
        }
        j = 0;
        for (const Triple& sa : plan->same_answer) {
            cluster.same_answers.push_back(QAItem{format_id("c%04d.sa%d", cluster_id, j++),
                                                  ItemKind::same_answer,
                                                  {marker(sa.r, 0), ent(sa.s), qend},
                                                  ent(sa.o),
                                                  draw_candidates(g, vocab, sa.r, sa.o, rng),
                                                  {sa},
                                                  cluster_id});
        }
        out.clusters.push_back(std::move(cluster));
        ++cluster_id;
    }
    return out;
}

// ---------------------------------------------------------------------------

Splits make_splits(const std::vector<Cluster>& clusters, double frac_forget, double frac_retain,
                   double frac_test, uint64_t seed) {
    for (double f : {frac_forget, frac_retain, frac_test})
        if (f < 0.0 || f > 1.0) throw ConfigError("make_splits: fraction outside [0,1]");
    if (frac_forget + frac_retain + frac_test > 1.0 + 1e-12)
        throw ConfigError("make_splits: fractions sum to more than 1");

    const int n = static_cast<int>(clusters.size());
    std::vector<int> ids(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = clusters[static_cast<size_t>(i)].base.cluster_id;
    Rng rng(derive_seed(seed, "world/splits"));
    rng.shuffle(ids);

    const int n_forget = static_cast<int>(std::lround(frac_forget * n));
    const int n_retain = static_cast<int>(std::lround(frac_retain * n));
    int n_test = static_cast<int>(std::lround(frac_test * n));
    n_test = std::min(n_test, n - n_forget - n_retain);

    Splits s;
    s.forget.assign(ids.begin(), ids.begin() + n_forget);
    s.retain.assign(ids.begin() + n_forget, ids.begin() + n_forget + n_retain);
    s.test.assign(ids.begin() + n_forget + n_retain, ids.begin() + n_forget + n_retain + n_test);
    std::sort(s.forget.begin(), s.forget.end());
    std::sort(s.retain.begin(), s.retain.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

Dataset synthesize(const GenParams& params) {
    const KnowledgeGraph graph = generate_graph(params);
    BuildResult built = build_clusters(graph, params.templates_per_relation, params.seed);
    Dataset ds;
    ds.params = params;
    ds.vocab = std::move(built.vocab);
    ds.clusters = std::move(built.clusters);
    ds.warnings = std::move(built.warnings);
    ds.splits = make_splits(ds.clusters, params.frac_forget, params.frac_retain, params.frac_test,
                            params.seed);
    return ds;
}

std::vector<const QAItem*> Cluster::all_items() const {
    std::vector<const QAItem*> out{&base};
    for (const auto& i : paraphrases) out.push_back(&i);
    for (const auto& i : multihops) out.push_back(&i);
    for (const auto& i : same_answers) out.push_back(&i);
    return out;
}

const Cluster* Dataset::cluster_by_id(int id) const {
    for (const auto& c : clusters)
        if (c.base.cluster_id == id) return &c;
    return nullptr;
}

// ---------------------------------------------------------------------------

namespace {

// entity id from a vocab token name, or -1 for marker/terminal tokens
int entity_of_token(const std::string& name, int n_famous) {
    int v = 0;
    if (std::sscanf(name.c_str(), "P%d", &v) == 1 && name[0] == 'P') return v;
    if (std::sscanf(name.c_str(), "B%d", &v) == 1 && name[0] == 'B') return n_famous + v;
    return -1;
}

bool contains_triple(const std::vector<Triple>& ks, const Triple& t) {
    return std::find(ks.begin(), ks.end(), t) != ks.end();
}

bool knowledge_disjoint(const std::vector<Triple>& a, const std::vector<Triple>& b) {
    for (const auto& t : a)
        if (contains_triple(b, t)) return false;
    return true;
}

}  // namespace

std::vector<std::string> audit_dataset(const Dataset& ds) {
    std::vector<std::string> bad;
    auto flag = [&bad](const std::string& id, const std::string& what) {
        bad.push_back(id + ": " + what);
    };

    const GenParams& p = ds.params;
    const int vocab_size = ds.vocab.size();
    auto in_pool = [&](int relation, int entity) {
        const int begin = p.n_famous + relation * p.obj_pool_size;
        return entity >= begin && entity < begin + p.obj_pool_size;
    };
    auto token_entity = [&](int token) {
        if (token < 0 || token >= vocab_size) return -2;
        return entity_of_token(ds.vocab.tokens[static_cast<size_t>(token)], p.n_famous);
    };

    auto check_item = [&](const QAItem& item, const QAItem& base) {
        for (int t : item.question)
            if (t < 0 || t >= vocab_size) flag(item.id, "question token outside vocab");
        if (item.answer < 0 || item.answer >= vocab_size) flag(item.id, "answer outside vocab");
        if (std::find(item.candidates.begin(), item.candidates.end(), item.answer) ==
            item.candidates.end())
            flag(item.id, "answer not among candidates");
        if (item.candidates[0] == item.candidates[1] || item.candidates[0] == item.candidates[2] ||
            item.candidates[1] == item.candidates[2])
            flag(item.id, "duplicate candidates");
        if (item.knowledge.empty()) flag(item.id, "empty knowledge set");

        // candidates must be valid objects of the item's own relation
        const Triple own = item.knowledge.size() == 1
                               ? item.knowledge[0]
                               : (item.knowledge[0].s == base.knowledge[0].o ? item.knowledge[0]
                                                                             : item.knowledge[1]);
        for (int c : item.candidates) {
            const int e = token_entity(c);
            if (e < 0 || !in_pool(own.r, e)) flag(item.id, "candidate not a valid relation object");
        }
        if (token_entity(item.answer) != own.o) flag(item.id, "answer token does not match fact");

        switch (item.kind) {
            case ItemKind::base:
                if (item.knowledge.size() != 1 || item.knowledge[0].s >= p.n_famous)
                    flag(item.id, "base fact must have a famous subject");
                break;
            case ItemKind::paraphrased:
                if (item.knowledge != base.knowledge) flag(item.id, "paraphrase changes knowledge");
                if (item.answer != base.answer) flag(item.id, "paraphrase changes answer");
                break;
            case ItemKind::multihop: {
                if (item.knowledge.size() != 2) {
                    flag(item.id, "two-hop item must carry two facts");
                    break;
                }
                if (!contains_triple(item.knowledge, base.knowledge[0]))
                    flag(item.id, "two-hop knowledge does not contain the base fact");
                if (item.knowledge[0] == item.knowledge[1])
                    flag(item.id, "two-hop knowledge does not strictly extend the base fact");
                for (int t : item.question)
                    if (t == item.answer) flag(item.id, "answer leaks into two-hop question");
                const Triple& chain =
                    item.knowledge[0] == base.knowledge[0] ? item.knowledge[1] : item.knowledge[0];
                if (chain.s != base.knowledge[0].o) flag(item.id, "broken chain");
                for (int t : item.question) {
                    const int e = token_entity(t);
                    if (e >= 0 && (e == chain.s || e == chain.o))
                        flag(item.id, "intermediate or final entity leaks into question");
                }
                break;
            }
            case ItemKind::same_answer:
                if (item.knowledge.size() != 1) flag(item.id, "shared-answer item must carry one fact");
                if (item.knowledge[0].s < p.n_famous)
                    flag(item.id, "shared-answer subject must not be famous");
                if (!knowledge_disjoint(item.knowledge, base.knowledge))
                    flag(item.id, "shared-answer knowledge overlaps the base fact");
                if (item.answer != base.answer) flag(item.id, "shared-answer answer differs");
                break;
        }
    };

    std::set<int> seen_ids;
    for (const Cluster& c : ds.clusters) {
        const std::string cid = "cluster " + std::to_string(c.base.cluster_id);
        if (!seen_ids.insert(c.base.cluster_id).second) flag(cid, "duplicate cluster id");
        if (c.paraphrases.size() != 3) flag(cid, "expected exactly 3 paraphrases");
        if (c.multihops.empty() && c.same_answers.empty())
            flag(cid, "cluster has neither two-hop nor shared-answer items");

        std::set<std::vector<int>> questions;
        questions.insert(c.base.question);
        for (const auto& para : c.paraphrases)
            if (!questions.insert(para.question).second)
                flag(para.id, "paraphrase question not lexically distinct");

        for (const QAItem* item : c.all_items()) {
            if (item->cluster_id != c.base.cluster_id) flag(item->id, "wrong cluster id");
            check_item(*item, c.base);
        }
    }

    // splits: disjoint, over known clusters, rounded sizes
    std::set<int> all;
    for (const auto& part : {ds.splits.forget, ds.splits.retain, ds.splits.test})
        for (int id : part) {
            if (!seen_ids.count(id)) bad.push_back("splits: unknown cluster id " + std::to_string(id));
            if (!all.insert(id).second) bad.push_back("splits: cluster in two splits");
        }
    const auto n = static_cast<double>(ds.clusters.size());
    if (static_cast<int>(ds.splits.forget.size()) != static_cast<int>(std::lround(p.frac_forget * n)))
        bad.push_back("splits: forget size does not match fraction");
    if (static_cast<int>(ds.splits.retain.size()) != static_cast<int>(std::lround(p.frac_retain * n)))
        bad.push_back("splits: retain size does not match fraction");

    return bad;
}

}  // namespace ulab::world
