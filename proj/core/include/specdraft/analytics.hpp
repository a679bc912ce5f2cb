#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace specdraft {

struct ChipSpec {
  std::string name;
  double peak_flops = 0.0;  // FLOP/s at half precision
  double bandwidth = 0.0;   // bytes/s

  void validate() const;
};

/// The only built-in chip: A100-80G, 311.84 TFLOP/s bf16 and 2.04 TB/s.
ChipSpec a100_80g();

/// Parses `key = value` / `key: value` lines with keys name, peak_flops_bf16
/// and mem_bandwidth. Blank lines and `#` comments are skipped.
ChipSpec parse_chip_spec(const std::string& text);
ChipSpec load_chip_spec(const std::filesystem::path& path);
/// A path to a spec file, or the name of a built-in chip.
ChipSpec resolve_chip(const std::string& path_or_name);

/// FLOPs per byte of a weight-streaming forward: 2M / (bytes_per_param * M).
double ai_model(double params, double bytes_per_param);
double ai_chip(const ChipSpec& chip);
/// rho = ai_c / ai_m.
double redundancy(double ai_c, double ai_m);
/// p = 1 + (m_s + l_d * m_p) / M.
double overhead_factor(double params, double m_s, double m_p, double l_d);

struct GainBudget {
  double r1 = 0.0;
  double r2 = 0.0;
  bool feasible = false;
};
/// r1 = (a / p) * ai_m and r2 = k; feasible when k <= rho / bs.
GainBudget gain_and_budget(double a, double p, double ai_m, double k, double rho, double bs);

double kappa(double a, double l_d, double k);
/// kappa divided by the realized speedup tps_sd / tps_base.
double theta(double kappa, double tps_sd, double tps_base);

/// Modeled tokens/s with `tokens_in_flight` tokens sharing one weight pass:
/// tokens / max(2 M tokens / peak, M bytes / bandwidth).
double roofline_throughput(const ChipSpec& chip, double params, double bytes_per_param, double tokens_in_flight);

struct RooflineReport {
  double ai_m = 0.0;
  double ai_c = 0.0;
  double rho = 0.0;
  double p = 1.0;
  double r1 = 0.0;
  double r2 = 0.0;
  bool feasible = false;
  double bs = 1.0;
};

struct RooflineInputs {
  double params = 7e9;
  double bytes_per_param = 2.0;
  double a = 1.0;
  double k = 1.0;
  double l_d = 1.0;
  double m_s = 0.0;
  double m_p = 0.0;
  double bs = 1.0;
};

RooflineReport roofline_report(const ChipSpec& chip, const RooflineInputs& in);

struct CurvePoint {
  double tokens = 0.0;
  double throughput = 0.0;
};
/// Throughput at each integer token count in [1, max_tokens].
std::vector<CurvePoint> roofline_curve(const ChipSpec& chip, double params, double bytes_per_param,
                                       std::size_t max_tokens);

}  // namespace specdraft
