#include "ulab/report_io.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "ulab/errors.hpp"

namespace ulab::eval {

using nlohmann::json;

namespace {

json opt_to_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    return *v;
}

std::optional<double> opt_from_json(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

std::string two_decimals(const std::optional<double>& v) {
    if (!v) return "";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", *v);
    return buf;
}

}  // namespace

void write_score_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out << "method,UA,UA_ext,TA,SA,MA_f,MA_t,MA,Score\n";
    for (const auto& r : reports) {
        out << r.method << ',' << two_decimals(r.ua) << ',' << two_decimals(r.ua_ext) << ','
            << two_decimals(r.ta) << ',' << two_decimals(r.sa) << ',' << two_decimals(r.ma_f) << ','
            << two_decimals(r.ma_t) << ',' << two_decimals(r.ma) << ',' << two_decimals(r.score)
            << '\n';
    }
    if (!out) throw DataError("write to '" + path.string() + "' failed");
}

void emit_report(const EvalReport& report, const std::vector<SuperficialVerdict>& verdicts,
                 const std::filesystem::path& records_path, const std::filesystem::path& csv_path) {
    std::ofstream out(records_path);
    if (!out) throw DataError("cannot open '" + records_path.string() + "' for writing");

    json head{{"record", "report"},
              {"method", report.method},
              {"ua", opt_to_json(report.ua)},
              {"ua_ext", opt_to_json(report.ua_ext)},
              {"ta", opt_to_json(report.ta)},
              {"sa", opt_to_json(report.sa)},
              {"sa_forget", opt_to_json(report.sa_forget)},
              {"sa_test", opt_to_json(report.sa_test)},
              {"ma_f", opt_to_json(report.ma_f)},
              {"ma_t", opt_to_json(report.ma_t)},
              {"ma", opt_to_json(report.ma)},
              {"score", opt_to_json(report.score)}};
    out << head.dump() << "\n";
    for (const auto& item : report.items) {
        out << json{{"record", "item"},
                    {"id", item.id},
                    {"kind", world::kind_name(item.kind)},
                    {"cluster", item.cluster_id},
                    {"before", item.before},
                    {"after", item.after}}
                   .dump()
            << "\n";
    }
    for (const auto& v : verdicts) {
        out << json{{"record", "verdict"},
                    {"cluster", v.cluster_id},
                    {"condition1", v.condition1_hits},
                    {"condition2", v.condition2_hits},
                    {"superficial", v.is_superficial}}
                   .dump()
            << "\n";
    }
    if (!out) throw DataError("write to '" + records_path.string() + "' failed");

    write_score_csv({report}, csv_path);
}

StoredReport read_report(const std::filesystem::path& records_path) {
    std::ifstream in(records_path);
    if (!in) throw DataError("cannot open '" + records_path.string() + "'");

    StoredReport stored;
    std::string line;
    int line_no = 0;
    bool have_head = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(records_path.string() + ": parse error at line " +
                            std::to_string(line_no) + ": " + e.what());
        }
        const std::string record = j.value("record", "");
        if (record == "report") {
            have_head = true;
            stored.report.method = j.value("method", "");
            stored.report.ua = opt_from_json(j, "ua");
            stored.report.ua_ext = opt_from_json(j, "ua_ext");
            stored.report.ta = opt_from_json(j, "ta");
            stored.report.sa = opt_from_json(j, "sa");
            stored.report.sa_forget = opt_from_json(j, "sa_forget");
            stored.report.sa_test = opt_from_json(j, "sa_test");
            stored.report.ma_f = opt_from_json(j, "ma_f");
            stored.report.ma_t = opt_from_json(j, "ma_t");
            stored.report.ma = opt_from_json(j, "ma");
            stored.report.score = opt_from_json(j, "score");
        } else if (record == "item") {
            stored.report.items.push_back(ItemOutcome{j.at("id").get<std::string>(),
                                                      world::kind_from_name(j.at("kind")),
                                                      j.at("cluster").get<int>(),
                                                      j.at("before").get<int>(),
                                                      j.at("after").get<int>()});
        } else if (record == "verdict") {
            SuperficialVerdict v;
            v.cluster_id = j.at("cluster").get<int>();
            v.condition1_hits = j.at("condition1").get<std::vector<std::string>>();
            v.condition2_hits = j.at("condition2").get<std::vector<std::string>>();
            v.is_superficial = j.at("superficial").get<bool>();
            stored.verdicts.push_back(std::move(v));
        } else {
            throw DataError(records_path.string() + ": unknown record at line " +
                            std::to_string(line_no));
        }
    }
    if (!have_head) throw DataError(records_path.string() + ": missing report record");
    return stored;
}

}  // namespace ulab::eval
