#include "cli/config.hpp"

#include <yaml-cpp/yaml.h>

#include "specdraft/prng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace specdraft::cli {

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json-lines" || name == "jsonl") return ReportFormat::kJsonLines;
  throw ConfigError("format", "expected csv or json-lines, got '" + name + "'");
}

const char* report_format_name(ReportFormat f) { return f == ReportFormat::kCsv ? "csv" : "json-lines"; }

std::vector<Token> parse_tokens(const std::string& text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::vector<Token> out;
  std::string word;
  while (in >> word) {
    Token v = 0;
    auto [p, ec] = std::from_chars(word.data(), word.data() + word.size(), v);
    if (ec != std::errc() || p != word.data() + word.size()) {
      throw ParameterError("'" + word + "' is not a token id");
    }
    out.push_back(v);
  }
  return out;
}

std::string format_tokens(const std::vector<Token>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

namespace {

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size() || text.empty()) {
    throw ConfigError(key, "expected a nonnegative integer, got '" + text + "'");
  }
  return v;
}

int parse_int(const std::string& key, const std::string& text) {
  int v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size() || text.empty()) {
    throw ConfigError(key, "expected an integer, got '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  if (text.empty()) throw ConfigError(key, "expected a number, got an empty value");
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || !std::isfinite(v)) {
    throw ConfigError(key, "expected a finite number, got '" + text + "'");
  }
  return v;
}

std::string real_str(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field uint_field(Member member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_uint(k, v));
          },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <typename Member>
Field int_field(Member member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_int(k, v); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <typename Member>
Field real_field(Member member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_real(k, v); },
          [member](const RunConfig& c) { return real_str(member(const_cast<RunConfig&>(c))); }};
}

template <typename Member>
Field string_field(Member member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; },
          [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
}

template <typename Member>
Field optional_uint_field(Member member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            if (v.empty() || v == "auto") {
              member(c).reset();
            } else {
              member(c) = parse_uint(k, v);
            }
          },
          [member](const RunConfig& c) {
            const auto& o = member(const_cast<RunConfig&>(c));
            return o ? std::to_string(*o) : std::string("auto");
          }};
}

#define SD_MEMBER(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::map<std::string, Field>& registry() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    f["seed"] = uint_field(SD_MEMBER(seed));
    f["format"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.format = parse_report_format(v); },
                   [](const RunConfig& c) { return std::string(report_format_name(c.format)); }};

    f["base.layers"] = uint_field(SD_MEMBER(base.layers));
    f["base.hidden"] = uint_field(SD_MEMBER(base.hidden));
    f["base.heads"] = uint_field(SD_MEMBER(base.heads));
    f["base.ffn"] = uint_field(SD_MEMBER(base.ffn));
    f["base.vocab"] = uint_field(SD_MEMBER(base.vocab));
    f["base.max_seq"] = uint_field(SD_MEMBER(base.max_seq));
    f["base.rope_base"] = real_field(SD_MEMBER(base.rope_base));
    f["base.norm_eps"] = real_field(SD_MEMBER(base.norm_eps));

    f["draft.l_d"] = uint_field(SD_MEMBER(draft.l_d));
    f["draft.heads"] = uint_field(SD_MEMBER(draft.heads));
    f["draft.ffn"] = uint_field(SD_MEMBER(draft.ffn));
    f["draft.blocks"] = uint_field(SD_MEMBER(draft.blocks));
    f["draft.norm_eps"] = real_field(SD_MEMBER(draft.norm_eps));

    f["train.batch_size"] = uint_field(SD_MEMBER(train.batch_size));
    f["train.grad_accum"] = uint_field(SD_MEMBER(train.grad_accum));
    f["train.seq_len"] = uint_field(SD_MEMBER(train.seq_len));
    f["train.epochs"] = uint_field(SD_MEMBER(train.epochs));
    f["train.steps"] = uint_field(SD_MEMBER(train.steps));
    f["train.max_lr"] = real_field(SD_MEMBER(train.optim.max_lr));
    f["train.min_lr"] = real_field(SD_MEMBER(train.optim.min_lr));
    f["train.warmup_fraction"] = real_field(SD_MEMBER(train.optim.warmup_fraction));
    f["train.beta1"] = real_field(SD_MEMBER(train.optim.beta1));
    f["train.beta2"] = real_field(SD_MEMBER(train.optim.beta2));
    f["train.eps"] = real_field(SD_MEMBER(train.optim.eps));
    f["train.weight_decay"] = real_field(SD_MEMBER(train.optim.weight_decay));

    f["corpus.kind"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                          try {
                            c.corpus.kind = parse_corpus_kind(v);
                          } catch (const ParameterError& e) {
                            throw ConfigError(k, e.what());
                          }
                        },
                        [](const RunConfig& c) { return std::string(corpus_kind_name(c.corpus.kind)); }};
    f["corpus.size"] = uint_field(SD_MEMBER(corpus.size));
    f["corpus.seq_len"] = uint_field(SD_MEMBER(corpus.seq_len));
    f["corpus.period"] = uint_field(SD_MEMBER(corpus.period));
    f["corpus.affine_a"] = optional_uint_field(SD_MEMBER(corpus.affine_a));
    f["corpus.affine_b"] = optional_uint_field(SD_MEMBER(corpus.affine_b));
    f["corpus.branching"] = uint_field(SD_MEMBER(corpus.branching));
    f["corpus.top_probability"] = real_field(SD_MEMBER(corpus.top_probability));

    f["paths.corpus"] = string_field(SD_MEMBER(paths.corpus));
    f["paths.base"] = string_field(SD_MEMBER(paths.base));
    f["paths.draft"] = string_field(SD_MEMBER(paths.draft));
    f["paths.out"] = string_field(SD_MEMBER(paths.out));
    f["paths.text"] = string_field(SD_MEMBER(paths.text));

    f["decode.prompt"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                            try {
                              c.decode.prompt = parse_tokens(v);
                            } catch (const ParameterError& e) {
                              throw ConfigError(k, e.what());
                            }
                          },
                          [](const RunConfig& c) { return format_tokens(c.decode.prompt); }};
    f["decode.n"] = uint_field(SD_MEMBER(decode.n));
    f["decode.k"] = uint_field(SD_MEMBER(decode.k));

    f["bench.seeds"] = uint_field(SD_MEMBER(bench.seeds));
    f["bench.prompts"] = uint_field(SD_MEMBER(bench.prompts));
    f["bench.prompt_len"] = uint_field(SD_MEMBER(bench.prompt_len));
    f["bench.n"] = uint_field(SD_MEMBER(bench.n));
    f["bench.threads"] = uint_field(SD_MEMBER(bench.threads));

    f["distill.prompts"] = uint_field(SD_MEMBER(distill.prompts));
    f["distill.prompt_len"] = uint_field(SD_MEMBER(distill.prompt_len));
    f["distill.max_len"] = uint_field(SD_MEMBER(distill.max_len));

    f["roofline.chip"] = string_field(SD_MEMBER(roofline.chip));
    f["roofline.model_params"] = real_field(SD_MEMBER(roofline.model_params));
    f["roofline.bytes_per_param"] = real_field(SD_MEMBER(roofline.bytes_per_param));
    f["roofline.bs"] = real_field(SD_MEMBER(roofline.bs));
    f["roofline.a"] = real_field(SD_MEMBER(roofline.a));
    f["roofline.k"] = real_field(SD_MEMBER(roofline.k));
    f["roofline.l_d"] = real_field(SD_MEMBER(roofline.l_d));
    f["roofline.m_s"] = real_field(SD_MEMBER(roofline.m_s));
    f["roofline.m_p"] = real_field(SD_MEMBER(roofline.m_p));
    f["roofline.max_tokens"] = uint_field(SD_MEMBER(roofline.max_tokens));

    f["gradcheck.points"] = int_field(SD_MEMBER(gradcheck.points));
    f["gradcheck.tolerance"] = real_field(SD_MEMBER(gradcheck.tolerance));
    return f;
  }();
  return fields;
}

#undef SD_MEMBER

std::string leaf_of(const std::string& key) {
  auto dot = key.rfind('.');
  return dot == std::string::npos ? key : key.substr(dot + 1);
}

// Draft hidden size, rotary base and corpus vocabulary follow the base.
void sync_derived(RunConfig& c) {
  c.draft.hidden = c.base.hidden;
  c.draft.rope_base = c.base.rope_base;
  c.corpus.vocab = c.base.vocab;
  c.corpus.seed = derive_seed(c.seed, "corpus");
  c.train.seed = c.seed;
}

// Rethrows a library validation error as a ConfigError, using the
// "key: message" prefix when the library supplied one.
template <typename Fn>
void check(Fn fn, const std::string& fallback_key) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const ParameterError& e) {
    std::string msg = e.what();
    auto colon = msg.find(": ");
    if (colon != std::string::npos && registry().count(msg.substr(0, colon))) {
      throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
    }
    throw ConfigError(fallback_key, msg);
  }
}

void require(bool ok, const std::string& key, const std::string& why) {
  if (!ok) throw ConfigError(key, why);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : registry()) keys.push_back(k);
  return keys;
}

std::string resolve_key(const std::string& key) {
  if (registry().count(key)) return key;
  std::vector<std::string> matches;
  for (const auto& [k, _] : registry()) {
    if (leaf_of(k) == key) matches.push_back(k);
  }
  if (matches.size() == 1) return matches.front();
  if (matches.empty()) throw ConfigError(key, "unknown configuration key");
  std::string options;
  for (const auto& m : matches) options += (options.empty() ? "" : ", ") + m;
  throw ConfigError(key, "ambiguous key; use one of " + options);
}

void set_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string full = resolve_key(key);
  registry().at(full).set(cfg, full, value);
}

std::string get_value(const RunConfig& cfg, const std::string& key) {
  const std::string full = resolve_key(key);
  return registry().at(full).get(cfg);
}

void RunConfig::validate() const {
  RunConfig c = *this;
  sync_derived(c);
  check([&] { c.base.validate(); }, "base");
  check([&] { c.draft.validate(); }, "draft");
  check([&] { c.train.validate(); }, "train");
  require(c.train.seq_len <= c.base.max_seq, "train.seq_len", "exceeds base.max_seq");
  require(c.train.seq_len >= c.draft.l_d + 2, "train.seq_len", "must be at least draft.l_d + 2");

  require(c.corpus.size >= 1, "corpus.size", "must be positive");
  require(c.corpus.seq_len >= 2, "corpus.seq_len", "must be at least 2");
  require(c.base.vocab >= 4, "base.vocab", "synthetic corpora need at least 4 tokens");
  require(c.corpus.period >= 2 && c.corpus.period <= c.base.vocab, "corpus.period", "must be in [2, base.vocab]");
  require(c.corpus.branching >= 1 && c.corpus.branching <= c.base.vocab, "corpus.branching",
          "must be in [1, base.vocab]");
  require(c.corpus.top_probability > 0.0 && c.corpus.top_probability <= 1.0, "corpus.top_probability",
          "must be in (0, 1]");

  require(!c.decode.prompt.empty(), "decode.prompt", "must hold at least one token");
  for (Token t : c.decode.prompt) {
    require(t >= 0 && static_cast<std::size_t>(t) < c.base.vocab, "decode.prompt",
            "token " + std::to_string(t) + " is outside the vocabulary");
  }
  require(c.decode.k == 0 || c.decode.k >= c.draft.l_d, "decode.k", "draft budget must be 0 (= l_d) or >= l_d");
  require(c.decode.prompt.size() + c.decode.n + c.draft.l_d + 1 <= c.base.max_seq, "decode.n",
          "prompt + n + l_d + 1 exceeds base.max_seq");

  require(c.bench.seeds >= 1, "bench.seeds", "must be positive");
  require(c.bench.prompts >= 1, "bench.prompts", "must be positive");
  require(c.bench.prompt_len >= 1, "bench.prompt_len", "must be positive");
  require(c.bench.threads >= 1, "bench.threads", "must be positive");
  require(c.bench.prompt_len + c.bench.n + c.draft.l_d + 1 <= c.base.max_seq, "bench.n",
          "prompt_len + n + l_d + 1 exceeds base.max_seq");

  require(c.distill.prompts >= 1, "distill.prompts", "must be positive");
  require(c.distill.prompt_len >= 1 && c.distill.prompt_len < c.base.max_seq, "distill.prompt_len",
          "must be in [1, base.max_seq)");
  require(c.distill.max_len >= 1, "distill.max_len", "must be positive");

  require(!c.roofline.chip.empty(), "roofline.chip", "must name a chip or a spec file");
  require(c.roofline.model_params > 0, "roofline.model_params", "must be positive");
  require(c.roofline.bytes_per_param > 0, "roofline.bytes_per_param", "must be positive");
  require(c.roofline.bs >= 1, "roofline.bs", "must be at least 1");
  require(c.roofline.k >= 1, "roofline.k", "must be at least 1");
  require(c.roofline.a >= 0, "roofline.a", "must be nonnegative");
  require(c.roofline.l_d >= 0, "roofline.l_d", "must be nonnegative");
  require(c.roofline.m_s >= 0, "roofline.m_s", "must be nonnegative");
  require(c.roofline.m_p >= 0, "roofline.m_p", "must be nonnegative");
  require(c.roofline.max_tokens >= 1, "roofline.max_tokens", "must be positive");

  require(c.gradcheck.points >= 1, "gradcheck.points", "must be positive");
  require(c.gradcheck.tolerance > 0, "gradcheck.tolerance", "must be positive");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, field] : registry()) out += k + "=" + field.get(*this) + "\n";
  return out;
}

std::string RunConfig::digest() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

void walk_yaml(RunConfig& cfg, const YAML::Node& node, const std::string& prefix) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      walk_yaml(cfg, kv.second, prefix.empty() ? key : prefix + "." + key);
    }
  } else if (node.IsSequence()) {
    std::string joined;
    for (const auto& item : node) {
      if (!item.IsScalar()) throw ConfigError(prefix, "lists may only hold scalars");
      joined += (joined.empty() ? "" : " ") + item.as<std::string>();
    }
    const std::string full = resolve_key(prefix);
    if (full != "decode.prompt") throw ConfigError(full, "does not take a list");
    set_value(cfg, full, joined);
  } else if (node.IsScalar()) {
    set_value(cfg, prefix, node.as<std::string>());
  } else if (node.IsNull()) {
    if (!prefix.empty()) set_value(cfg, prefix, "");
  }
}

}  // namespace

void apply_yaml(RunConfig& cfg, const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config", std::string("YAML parse error: ") + e.what());
  }
  if (!root || root.IsNull()) return;
  if (!root.IsMap()) throw ConfigError("config", "top level must be a mapping");
  walk_yaml(cfg, root, "");
}

RunConfig parse_config_text(const std::string& yaml, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  apply_yaml(cfg, yaml);
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(o, "override must look like key=value");
    set_value(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
  sync_derived(cfg);
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    text = ss.str();
  }
  return parse_config_text(text, overrides);
}

}  // namespace specdraft::cli
