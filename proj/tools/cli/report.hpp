#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "cli/config.hpp"

namespace specdraft::cli {

using Cell = std::variant<std::int64_t, double, std::string>;

struct Report {
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string timestamp;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add_row(std::vector<Cell> row);
};

/// Rounds to 6 significant digits, the precision every report uses.
double round6(double v);
std::string format6(double v);

/// Writes the metric table to `path` (CSV with a header, or one JSON object
/// per row with keys in column order) and the run metadata to
/// `path` + ".meta.json", so reruns produce byte-identical tables.
void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path);

/// Reads back a json-lines table written by emit_report.
std::vector<std::vector<Cell>> parse_json_lines(const std::filesystem::path& path,
                                                const std::vector<std::string>& columns);
/// Reads back a CSV table: header and rows as raw strings.
std::vector<std::vector<std::string>> parse_csv(const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace specdraft::cli
