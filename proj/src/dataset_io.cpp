#include "ulab/dataset_io.hpp"

#include <fstream>
#include <map>

#include <json.hpp>

#include "ulab/errors.hpp"

namespace ulab::world {

using nlohmann::json;

namespace {

constexpr const char* kFormatVersion = "1";

json params_to_json(const GenParams& p) {
    return json{{"seed", p.seed},
                {"n_famous", p.n_famous},
                {"n_background", p.n_background},
                {"n_relations", p.n_relations},
                {"obj_pool_size", p.obj_pool_size},
                {"max_triples_per_famous", p.max_triples_per_famous},
                {"chain_density", p.chain_density},
                {"max_chains_per_object", p.max_chains_per_object},
                {"same_answer_max", p.same_answer_max},
                {"templates_per_relation", p.templates_per_relation},
                {"frac_forget", p.frac_forget},
                {"frac_retain", p.frac_retain},
                {"frac_test", p.frac_test}};
}

GenParams params_from_json(const json& j) {
    GenParams p;
    p.seed = j.at("seed").get<uint64_t>();
    p.n_famous = j.at("n_famous").get<int>();
    p.n_background = j.at("n_background").get<int>();
    p.n_relations = j.at("n_relations").get<int>();
    p.obj_pool_size = j.at("obj_pool_size").get<int>();
    p.max_triples_per_famous = j.at("max_triples_per_famous").get<int>();
    p.chain_density = j.at("chain_density").get<double>();
    p.max_chains_per_object = j.at("max_chains_per_object").get<int>();
    p.same_answer_max = j.at("same_answer_max").get<int>();
    p.templates_per_relation = j.at("templates_per_relation").get<int>();
    p.frac_forget = j.at("frac_forget").get<double>();
    p.frac_retain = j.at("frac_retain").get<double>();
    p.frac_test = j.at("frac_test").get<double>();
    return p;
}

json item_to_json(const QAItem& item) {
    json k = json::array();
    for (const Triple& t : item.knowledge) k.push_back(json::array({t.s, t.r, t.o}));
    return json{{"record", "item"},
                {"id", item.id},
                {"kind", kind_name(item.kind)},
                {"cluster", item.cluster_id},
                {"q", item.question},
                {"a", item.answer},
                {"cand", item.candidates},
                {"k", std::move(k)}};
}

QAItem item_from_json(const json& j) {
    QAItem item;
    item.id = j.at("id").get<std::string>();
    item.kind = kind_from_name(j.at("kind").get<std::string>());
    item.cluster_id = j.at("cluster").get<int>();
    item.question = j.at("q").get<std::vector<int>>();
    item.answer = j.at("a").get<int>();
    const auto cand = j.at("cand").get<std::vector<int>>();
    if (cand.size() != 3) throw DataError("item '" + item.id + "': expected 3 candidates");
    std::copy(cand.begin(), cand.end(), item.candidates.begin());
    for (const auto& t : j.at("k")) {
        if (!t.is_array() || t.size() != 3) throw DataError("item '" + item.id + "': bad triple");
        item.knowledge.push_back({t[0].get<int>(), t[1].get<int>(), t[2].get<int>()});
    }
    return item;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");

    json manifest{{"record", "manifest"},
                  {"version", kFormatVersion},
                  {"params", params_to_json(ds.params)},
                  {"vocab", ds.vocab.tokens},
                  {"splits",
                   {{"forget", ds.splits.forget},
                    {"retain", ds.splits.retain},
                    {"test", ds.splits.test}}},
                  {"warnings", ds.warnings}};
    out << manifest.dump() << "\n";
    for (const Cluster& c : ds.clusters)
        for (const QAItem* item : c.all_items()) out << item_to_json(*item).dump() << "\n";
    if (!out) throw DataError("write to '" + path.string() + "' failed");
}

Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");

    std::string line;
    int line_no = 0;
    auto next_line = [&]() -> bool {
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty()) return true;
        }
        return false;
    };
    auto parse = [&]() -> json {
        try {
            return json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path.string() + ": parse error at line " + std::to_string(line_no) +
                            ": " + e.what());
        }
    };

    if (!next_line()) throw DataError(path.string() + ": empty file, manifest missing");
    Dataset ds;
    try {
        const json m = parse();
        if (m.value("record", "") != "manifest")
            throw DataError(path.string() + ": first record must be the manifest");
        const auto version = m.at("version").get<std::string>();
        if (version != kFormatVersion)
            throw DataError(path.string() + ": unsupported dataset version '" + version + "'");
        ds.version = version;
        ds.params = params_from_json(m.at("params"));
        for (const auto& tok : m.at("vocab")) {
            ds.vocab.id_of.emplace(tok.get<std::string>(), ds.vocab.size());
            ds.vocab.tokens.push_back(tok.get<std::string>());
        }
        ds.splits.forget = m.at("splits").at("forget").get<std::vector<int>>();
        ds.splits.retain = m.at("splits").at("retain").get<std::vector<int>>();
        ds.splits.test = m.at("splits").at("test").get<std::vector<int>>();
        if (m.contains("warnings")) ds.warnings = m.at("warnings").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": bad manifest at line " + std::to_string(line_no) + ": " +
                        e.what());
    }

    std::map<int, Cluster> clusters;
    while (next_line()) {
        json j = parse();
        try {
            if (j.value("record", "") != "item")
                throw DataError("expected an item record");
            QAItem item = item_from_json(j);
            Cluster& c = clusters[item.cluster_id];
            switch (item.kind) {
                case ItemKind::base:
                    if (!c.base.id.empty()) throw DataError("duplicate base item");
                    c.base = std::move(item);
                    break;
                case ItemKind::paraphrased: c.paraphrases.push_back(std::move(item)); break;
                case ItemKind::multihop: c.multihops.push_back(std::move(item)); break;
                case ItemKind::same_answer: c.same_answers.push_back(std::move(item)); break;
            }
        } catch (const std::exception& e) {
            throw DataError(path.string() + ": bad item at line " + std::to_string(line_no) + ": " +
                            e.what());
        }
    }

    ds.clusters.reserve(clusters.size());
    for (auto& [id, c] : clusters) {
        if (c.base.id.empty())
            throw DataError(path.string() + ": cluster " + std::to_string(id) + " has no base item");
        ds.clusters.push_back(std::move(c));
    }
    return ds;
}

void write_vocab(const Vocab& vocab, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    json j = json::object();
    for (int i = 0; i < vocab.size(); ++i) j[vocab.tokens[static_cast<size_t>(i)]] = i;
    out << j.dump(2) << "\n";
}

}  // namespace ulab::world
