#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "specdraft/base_lm.hpp"
#include "specdraft/corpus.hpp"
#include "specdraft/specformer.hpp"
#include "specdraft/training.hpp"

namespace specdraft::cli {

enum class ReportFormat { kCsv, kJsonLines };
ReportFormat parse_report_format(const std::string& name);
const char* report_format_name(ReportFormat f);

struct PathConfig {
  std::string corpus;
  std::string base;
  std::string draft;
  std::string out;
  std::string text;  // raw text to ingest in gen-corpus
};

struct DecodeConfig {
  std::vector<Token> prompt{1, 2, 3, 4};
  std::size_t n = 64;
  /// Draft-token budget; 0 means l_d.
  std::size_t k = 0;
};

struct BenchConfig {
  std::size_t seeds = 10;
  std::size_t prompts = 4;
  std::size_t prompt_len = 8;
  std::size_t n = 64;
  std::size_t threads = 1;
};

struct DistillConfig {
  std::size_t prompts = 256;
  std::size_t prompt_len = 8;
  std::size_t max_len = 56;
};

struct RooflineConfig {
  std::string chip = "a100-80g";
  double model_params = 7e9;
  double bytes_per_param = 2.0;
  double bs = 1.0;
  double a = 1.0;
  double k = 1.0;
  double l_d = 1.0;
  double m_s = 0.0;
  double m_p = 0.0;
  std::size_t max_tokens = 256;
};

struct GradcheckConfig {
  int points = 3;
  double tolerance = 1e-3;
};

/// Every setting a subcommand can read. Draft hidden size and rotary base
/// always follow the base model.
struct RunConfig {
  std::uint64_t seed = 0;
  ReportFormat format = ReportFormat::kCsv;
  BaseLMConfig base;
  SpecFormerConfig draft;
  TrainConfig train;
  CorpusSpec corpus;
  PathConfig paths;
  DecodeConfig decode;
  BenchConfig bench;
  DistillConfig distill;
  RooflineConfig roofline;
  GradcheckConfig gradcheck;

  /// Throws ConfigError naming the first offending key.
  void validate() const;
  /// Canonical `key=value` lines for every setting, sorted by key.
  std::string canonical() const;
  /// FNV-1a of canonical(), as 16 hex digits.
  std::string digest() const;
};

class ConfigError : public ParameterError {
 public:
  ConfigError(std::string key, const std::string& message)
      : ParameterError(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Every accepted dotted key.
std::vector<std::string> config_keys();

/// Resolves a full dotted key or a leaf name that is unique across all keys.
std::string resolve_key(const std::string& key);

/// Sets one key from its textual value; throws ConfigError on unknown keys
/// or values of the wrong type.
void set_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_value(const RunConfig& cfg, const std::string& key);

/// Applies a YAML document (nested maps; leaves are scalars, or sequences
/// for token lists). An empty document changes nothing.
void apply_yaml(RunConfig& cfg, const std::string& text);

/// Defaults, then the file at `path` (if nonempty), then `key=value`
/// overrides; validated before returning.
RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);
RunConfig parse_config_text(const std::string& yaml, const std::vector<std::string>& overrides);

/// Space- or comma-separated token ids.
std::vector<Token> parse_tokens(const std::string& text);
std::string format_tokens(const std::vector<Token>& tokens);

}  // namespace specdraft::cli
