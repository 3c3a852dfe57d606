#pragma once

// Evaluation outputs: a line-delimited record file (full precision, one
// record per line: report, items, verdicts) and a CSV score table rounded to
// two decimals for display.

#include <filesystem>
#include <vector>

#include "ulab/evalkit.hpp"

namespace ulab::eval {

void emit_report(const EvalReport& report, const std::vector<SuperficialVerdict>& verdicts,
                 const std::filesystem::path& records_path, const std::filesystem::path& csv_path);

struct StoredReport {
    EvalReport report;
    std::vector<SuperficialVerdict> verdicts;
};

StoredReport read_report(const std::filesystem::path& records_path);

// Combined score table, one row per report, stable column order.
void write_score_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path);

}  // namespace ulab::eval
