#include "cli/report.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

namespace specdraft::cli {

using nlohmann::ordered_json;

void Report::add_row(std::vector<Cell> row) {
  if (row.size() != columns.size()) {
    throw DimensionError("report row has " + std::to_string(row.size()) + " cells for " +
                         std::to_string(columns.size()) + " columns");
  }
  rows.push_back(std::move(row));
}

std::string format6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

double round6(double v) { return std::strtod(format6(v).c_str(), nullptr); }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string cell_text(const Cell& c) {
  if (auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  if (auto* d = std::get_if<double>(&c)) return format6(*d);
  return csv_escape(std::get<std::string>(c));
}

ordered_json cell_json(const Cell& c) {
  if (auto* i = std::get_if<std::int64_t>(&c)) return *i;
  if (auto* d = std::get_if<double>(&c)) return round6(*d);
  return std::get<std::string>(c);
}

}  // namespace

void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write report " + path.string());
  if (format == ReportFormat::kCsv) {
    for (std::size_t i = 0; i < report.columns.size(); ++i) f << (i ? "," : "") << csv_escape(report.columns[i]);
    f << '\n';
    for (const auto& row : report.rows) {
      for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << cell_text(row[i]);
      f << '\n';
    }
  } else {
    for (const auto& row : report.rows) {
      ordered_json obj = ordered_json::object();
      for (std::size_t i = 0; i < row.size(); ++i) obj[report.columns[i]] = cell_json(row[i]);
      f << obj.dump() << '\n';
    }
  }
  if (!f) throw IoError("failed while writing report " + path.string());

  std::ofstream meta(path.string() + ".meta.json");
  if (!meta) throw IoError("cannot write report metadata for " + path.string());
  ordered_json m{{"seed", report.seed},
                 {"config_digest", report.config_digest},
                 {"timestamp", report.timestamp},
                 {"format", report_format_name(format)},
                 {"columns", report.columns},
                 {"rows", report.rows.size()}};
  meta << m.dump(2) << '\n';
}

std::vector<std::vector<Cell>> parse_json_lines(const std::filesystem::path& path,
                                                const std::vector<std::string>& columns) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read report " + path.string());
  std::vector<std::vector<Cell>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    ordered_json obj;
    try {
      obj = ordered_json::parse(line);
    } catch (const ordered_json::exception& e) {
      throw IoError("malformed json-lines row in " + path.string() + ": " + e.what());
    }
    std::vector<Cell> row;
    for (const auto& col : columns) {
      if (!obj.contains(col)) throw IoError("json-lines row lacks column " + col);
      const auto& v = obj[col];
      if (v.is_number_integer()) {
        row.emplace_back(v.get<std::int64_t>());
      } else if (v.is_number()) {
        row.emplace_back(v.get<double>());
      } else if (v.is_string()) {
        row.emplace_back(v.get<std::string>());
      } else {
        throw IoError("json-lines column " + col + " holds an unsupported value");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<std::vector<std::string>> parse_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read report " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        cells.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    cells.push_back(std::move(cur));
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace specdraft::cli
