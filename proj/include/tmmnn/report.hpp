#pragma once

#include "tmmnn/robustness.hpp"

namespace tmmnn {

// CSV with the exact header
//   method,noise_kind,noise_level,seed,n_queries,k,retrieval_rate
// (plus a leading ablation_key column when any row carries one). Rows are
// sorted by keys and floats use 6 significant digits, so identical reports
// serialize byte-identically.
void write_report_csv(const SelfRetrievalReport& report, const std::string& path);

// Deterministic pretty-printed JSON artifact.
void write_diag_json(const nlohmann::ordered_json& diag, const std::string& path);

// Parses a file produced by write_report_csv (used by round-trip tests and
// the CLI's summary output).
SelfRetrievalReport read_report_csv(const std::string& path);

std::string format_float(double v);  // 6 significant digits, locale-free

}  // namespace tmmnn
