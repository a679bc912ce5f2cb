#include "specdraft/analytics.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "specdraft/errors.hpp"

namespace specdraft {

namespace {

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ParameterError(std::string(what) + " must be positive and finite");
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ParameterError("chip spec key '" + key + "' is not a number: " + text);
  }
  if (used != text.size()) throw ParameterError("chip spec key '" + key + "' has trailing text: " + text);
  return v;
}

}  // namespace

void ChipSpec::validate() const {
  require_positive(peak_flops, "peak_flops_bf16");
  require_positive(bandwidth, "mem_bandwidth");
}

ChipSpec a100_80g() { return {"a100-80g", 311.84e12, 2.04e12}; }

ChipSpec parse_chip_spec(const std::string& text) {
  ChipSpec chip;
  bool has_peak = false, has_bw = false;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto sep = line.find_first_of("=:");
    if (sep == std::string::npos) {
      throw ParameterError("chip spec line " + std::to_string(lineno) + " is not key=value: " + line);
    }
    const std::string key = trim(line.substr(0, sep));
    const std::string value = trim(line.substr(sep + 1));
    if (key == "name") {
      chip.name = value;
    } else if (key == "peak_flops_bf16") {
      chip.peak_flops = parse_double(key, value);
      has_peak = true;
    } else if (key == "mem_bandwidth") {
      chip.bandwidth = parse_double(key, value);
      has_bw = true;
    } else {
      throw ParameterError("unknown chip spec key '" + key + "'");
    }
  }
  if (!has_peak) throw ParameterError("chip spec is missing peak_flops_bf16");
  if (!has_bw) throw ParameterError("chip spec is missing mem_bandwidth");
  chip.validate();
  return chip;
}

ChipSpec load_chip_spec(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read chip spec " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_chip_spec(ss.str());
}

ChipSpec resolve_chip(const std::string& path_or_name) {
  std::string lower = path_or_name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "a100" || lower == "a100-80g") return a100_80g();
  return load_chip_spec(path_or_name);
}

double ai_model(double params, double bytes_per_param) {
  require_positive(params, "parameter count");
  require_positive(bytes_per_param, "bytes per parameter");
  return 2.0 * params / (bytes_per_param * params);
}

double ai_chip(const ChipSpec& chip) {
  chip.validate();
  return chip.peak_flops / chip.bandwidth;
}

double redundancy(double ai_c, double ai_m) {
  if (!(ai_m > 0.0)) throw ParameterError("model arithmetic intensity must be positive");
  if (ai_c < 0.0) throw ParameterError("chip arithmetic intensity must be nonnegative");
  return ai_c / ai_m;
}

double overhead_factor(double params, double m_s, double m_p, double l_d) {
  require_positive(params, "parameter count");
  if (m_s < 0.0 || m_p < 0.0 || l_d < 0.0) throw ParameterError("draft parameter counts must be nonnegative");
  return 1.0 + (m_s + l_d * m_p) / params;
}

GainBudget gain_and_budget(double a, double p, double ai_m, double k, double rho, double bs) {
  if (!(p >= 1.0)) throw ParameterError("overhead factor p must be at least 1");
  if (!(bs >= 1.0)) throw ParameterError("batch size must be at least 1");
  return {a / p * ai_m, k, k <= rho / bs};
}

double kappa(double a, double l_d, double k) {
  if (!(k >= 1.0)) throw ParameterError("draft budget k must be at least 1");
  return a * l_d / k;
}

double theta(double kappa, double tps_sd, double tps_base) {
  require_positive(tps_base, "tps_base");
  require_positive(tps_sd, "tps_sd");
  return kappa / (tps_sd / tps_base);
}

double roofline_throughput(const ChipSpec& chip, double params, double bytes_per_param, double tokens_in_flight) {
  chip.validate();
  require_positive(params, "parameter count");
  require_positive(bytes_per_param, "bytes per parameter");
  require_positive(tokens_in_flight, "tokens in flight");
  const double compute_time = 2.0 * params * tokens_in_flight / chip.peak_flops;
  const double memory_time = params * bytes_per_param / chip.bandwidth;
  // On the compute branch tokens/time simplifies to peak / 2M; returning it
  // directly keeps the plateau exactly flat instead of wobbling by an ulp.
  if (compute_time >= memory_time) return chip.peak_flops / (2.0 * params);
  return tokens_in_flight / memory_time;
}

RooflineReport roofline_report(const ChipSpec& chip, const RooflineInputs& in) {
  RooflineReport r;
  r.ai_m = ai_model(in.params, in.bytes_per_param);
  r.ai_c = ai_chip(chip);
  r.rho = redundancy(r.ai_c, r.ai_m);
  r.p = overhead_factor(in.params, in.m_s, in.m_p, in.l_d);
  auto g = gain_and_budget(in.a, r.p, r.ai_m, in.k, r.rho, in.bs);
  r.r1 = g.r1;
  r.r2 = g.r2;
  r.feasible = g.feasible;
  r.bs = in.bs;
  return r;
}

std::vector<CurvePoint> roofline_curve(const ChipSpec& chip, double params, double bytes_per_param,
                                       std::size_t max_tokens) {
  std::vector<CurvePoint> out;
  out.reserve(max_tokens);
  for (std::size_t t = 1; t <= max_tokens; ++t) {
    const double tokens = static_cast<double>(t);
    out.push_back({tokens, roofline_throughput(chip, params, bytes_per_param, tokens)});
  }
  return out;
}

}  // namespace specdraft
