#include "tmmnn/report.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace tmmnn {

std::string format_float(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v,
                                 std::chars_format::general, 6);
  return std::string(buf, res.ptr);
}

namespace {

bool report_has_ablation(const SelfRetrievalReport& report) {
  return std::any_of(report.rows.begin(), report.rows.end(),
                     [](const SelfRetrievalRow& r) { return !r.ablation_key.empty(); });
}

std::vector<SelfRetrievalRow> sorted_rows(const SelfRetrievalReport& report) {
  auto rows = report.rows;
  std::sort(rows.begin(), rows.end(),
            [](const SelfRetrievalRow& a, const SelfRetrievalRow& b) {
              return std::tie(a.ablation_key, a.method, a.noise_kind,
                              a.noise_level, a.seed) <
                     std::tie(b.ablation_key, b.method, b.noise_kind,
                              b.noise_level, b.seed);
            });
  return rows;
}

}  // namespace

void write_report_csv(const SelfRetrievalReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  const bool ablation = report_has_ablation(report);
  if (ablation) f << "ablation_key,";
  f << "method,noise_kind,noise_level,seed,n_queries,k,retrieval_rate\n";
  for (const auto& r : sorted_rows(report)) {
    if (ablation) f << r.ablation_key << ",";
    f << r.method << "," << r.noise_kind << "," << format_float(r.noise_level)
      << "," << r.seed << "," << r.n_queries << "," << r.k << ","
      << format_float(r.retrieval_rate) << "\n";
  }
  if (!f) throw DataError("short write to " + path);
}

void write_diag_json(const nlohmann::ordered_json& diag, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << diag.dump(2) << "\n";
  if (!f) throw DataError("short write to " + path);
}

SelfRetrievalReport read_report_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty report");
  const bool ablation = line.rfind("ablation_key,", 0) == 0;
  const std::string expect =
      std::string(ablation ? "ablation_key," : "") +
      "method,noise_kind,noise_level,seed,n_queries,k,retrieval_rate";
  if (line != expect)
    throw FormatError(path + ": unexpected header \"" + line + "\"");

  SelfRetrievalReport report;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    SelfRetrievalRow row;
    auto next = [&] {
      if (!std::getline(ss, field, ','))
        throw FormatError(path + ": short row \"" + line + "\"");
      return field;
    };
    if (ablation) row.ablation_key = next();
    row.method = next();
    row.noise_kind = next();
    row.noise_level = std::stod(next());
    row.seed = std::stoull(next());
    row.n_queries = std::stoi(next());
    row.k = std::stoi(next());
    row.retrieval_rate = std::stod(next());
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace tmmnn
