#pragma once

// Synthetic world construction: a functional knowledge graph over famous and
// background entities, QA clusters built from its triples (base question,
// three paraphrases, chained two-hop questions, shared-answer questions), and
// seeded forget/retain/test splits over clusters.
//
// Questions are structured token sequences, not natural language: a relation
// surface-variant marker, subject entity token(s), and a terminal marker. A
// paraphrase is the same fact under a different variant marker; a two-hop
// question is (second-relation marker, first-relation marker, subject) so the
// intermediate and final entities never appear in the question itself.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ulab::world {

struct Triple {
    int s = 0;
    int r = 0;
    int o = 0;
    auto operator<=>(const Triple&) const = default;
};

struct GenParams {
    uint64_t seed = 1;
    int n_famous = 200;
    int n_background = 600;
    int n_relations = 19;
    int obj_pool_size = 12;           // objects per relation, disjoint pools
    int max_triples_per_famous = 4;   // each famous entity draws 1..k facts
    double chain_density = 0.5;       // fraction of objects with outgoing facts
    int max_chains_per_object = 2;
    int same_answer_max = 8;          // per-cluster cap on shared-answer items
    int templates_per_relation = 4;   // surface variants; first is the base form
    double frac_forget = 0.05;
    double frac_retain = 0.10;
    double frac_test = 0.70;

    auto operator<=>(const GenParams&) const = default;
};

// Entity ids: [0, n_famous) are famous subjects; the rest are background.
// Background entities split into per-relation object pools (first
// n_relations * obj_pool_size ids) and shared-answer subjects (the remainder).
struct KnowledgeGraph {
    int n_famous = 0;
    int n_background = 0;
    int n_relations = 0;
    int obj_pool_size = 0;
    std::vector<Triple> triples;  // sorted, unique (s, r)

    bool operator==(const KnowledgeGraph&) const = default;

    int n_entities() const { return n_famous + n_background; }
    bool is_famous(int e) const { return e >= 0 && e < n_famous; }

    // object pool of relation r occupies a contiguous id range
    int pool_begin(int r) const { return n_famous + r * obj_pool_size; }
    int pool_end(int r) const { return pool_begin(r) + obj_pool_size; }
    bool in_pool(int r, int e) const { return e >= pool_begin(r) && e < pool_end(r); }
    // relation whose pool contains entity e, or -1
    int pool_relation(int e) const {
        const int off = e - n_famous;
        if (off < 0 || off >= n_relations * obj_pool_size) return -1;
        return off / obj_pool_size;
    }

    std::optional<int> object_of(int s, int r) const;
    std::vector<Triple> outgoing(int s) const;
};

KnowledgeGraph generate_graph(const GenParams& params);

enum class ItemKind { base, paraphrased, multihop, same_answer };

const char* kind_name(ItemKind k);
ItemKind kind_from_name(const std::string& name);

struct QAItem {
    std::string id;
    ItemKind kind = ItemKind::base;
    std::vector<int> question;       // token ids
    int answer = 0;                  // token id of the object entity
    std::array<int, 3> candidates{}; // token ids, seeded display order, answer included
    std::vector<Triple> knowledge;   // entity/relation ids
    int cluster_id = 0;

    bool operator==(const QAItem&) const = default;
};

struct Cluster {
    QAItem base;
    std::vector<QAItem> paraphrases;    // exactly 3
    std::vector<QAItem> multihops;      // 0+
    std::vector<QAItem> same_answers;   // 0+; multihops + same_answers nonempty

    bool operator==(const Cluster&) const = default;

    std::vector<const QAItem*> all_items() const;
};

struct Splits {
    std::vector<int> forget;  // cluster ids, ascending
    std::vector<int> retain;
    std::vector<int> test;

    bool operator==(const Splits&) const = default;
};

struct Vocab {
    std::vector<std::string> tokens;          // index == token id
    std::map<std::string, int> id_of;

    bool operator==(const Vocab& other) const { return tokens == other.tokens; }

    int size() const { return static_cast<int>(tokens.size()); }
    int require(const std::string& name) const;
};

inline constexpr const char* kQEndToken = "QEND";
inline constexpr const char* kRejectToken = "REJECT";

struct BuildResult {
    std::vector<Cluster> clusters;
    Vocab vocab;
    std::vector<std::string> warnings;  // skipped clusters etc.
};

// One cluster per qualifying famous-subject triple; clusters with neither
// two-hop nor shared-answer items are dropped.
BuildResult build_clusters(const KnowledgeGraph& graph, int templates_per_relation, uint64_t seed);

Splits make_splits(const std::vector<Cluster>& clusters, double frac_forget, double frac_retain,
                   double frac_test, uint64_t seed);

struct Dataset {
    std::string version = "1";
    GenParams params;
    Vocab vocab;
    std::vector<Cluster> clusters;
    Splits splits;
    std::vector<std::string> warnings;

    bool operator==(const Dataset& other) const {
        return version == other.version && params == other.params && vocab == other.vocab &&
               clusters == other.clusters && splits == other.splits;
    }

    const Cluster* cluster_by_id(int id) const;
};

// graph -> clusters -> splits, all from params.seed
Dataset synthesize(const GenParams& params);

// Checks every structural invariant of the generated data; returns human
// readable violations (empty means the dataset is sound).
std::vector<std::string> audit_dataset(const Dataset& ds);

// token helpers
std::string entity_token(const KnowledgeGraph& g, int entity);
std::string relation_marker(int relation, int variant);

}  // namespace ulab::world
