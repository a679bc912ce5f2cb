#include "cli/commands.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "cli/report.hpp"
#include "specdraft/analytics.hpp"
#include "specdraft/checkpoint.hpp"
#include "specdraft/gradcheck.hpp"
#include "specdraft/prng.hpp"
#include "specdraft/sd_engine.hpp"

namespace specdraft::cli {

namespace fs = std::filesystem;

namespace {

std::string ext(ReportFormat f) { return f == ReportFormat::kCsv ? ".csv" : ".jsonl"; }

const std::string& need_path(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError(key, "this subcommand needs a path");
  return value;
}

Report make_report(const RunConfig& cfg, std::vector<std::string> columns) {
  Report r;
  r.seed = cfg.seed;
  r.config_digest = cfg.digest();
  r.timestamp = utc_timestamp();
  r.columns = std::move(columns);
  return r;
}

// Writes to `path` when given, else prints the table as CSV.
void emit_or_print(const Report& r, const RunConfig& cfg, const fs::path& path, std::ostream& out) {
  if (!path.empty()) {
    emit_report(r, cfg.format, path);
    out << "report: " << path.string() << '\n';
    return;
  }
  for (std::size_t i = 0; i < r.columns.size(); ++i) out << (i ? "," : "") << r.columns[i];
  out << '\n';
  for (const auto& row : r.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << (i ? "," : "");
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, double>) {
              out << format6(v);
            } else {
              out << v;
            }
          },
          row[i]);
    }
    out << '\n';
  }
}

void write_tokens(const std::vector<Token>& tokens, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << format_tokens(tokens) << '\n';
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + path);
  f << format_tokens(tokens) << '\n';
}

std::vector<std::vector<Token>> corpus_prompts(const Corpus& corpus, std::size_t count, std::size_t len) {
  std::vector<std::vector<Token>> prompts;
  for (const auto& e : corpus.entries) {
    if (prompts.size() == count) break;
    const std::size_t n = std::min(len, e.size());
    prompts.emplace_back(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return prompts;
}

void print_stats(const AcceptanceStats& s, std::ostream& out) {
  out << "steps=" << s.steps << " tokens_emitted=" << s.tokens_emitted << " a=" << format6(s.a)
      << " kappa=" << format6(s.kappa) << " l_d=" << s.l_d << " k=" << s.k << " histogram=";
  for (std::size_t i = 0; i < s.histogram.size(); ++i) out << (i ? "," : "") << s.histogram[i];
  out << '\n';
}

Report loss_report(const RunConfig& cfg, const std::vector<double>& losses, std::size_t total) {
  Report r = make_report(cfg, {"step", "loss", "lr"});
  for (std::size_t s = 0; s < losses.size(); ++s) {
    r.add_row({static_cast<std::int64_t>(s), losses[s], lr_schedule(s + 1, total, cfg.train.optim)});
  }
  return r;
}

int cmd_gen_corpus(const RunConfig& cfg, std::ostream& out) {
  const std::string path = cfg.paths.out.empty() ? need_path(cfg.paths.corpus, "paths.corpus") : cfg.paths.out;
  Corpus c = cfg.paths.text.empty() ? gen_corpus(cfg.corpus)
                                    : ingest_text_file(cfg.paths.text, cfg.base.vocab, cfg.corpus.seq_len);
  save_corpus(c, path);
  out << "wrote " << c.size() << " entries (" << c.total_tokens() << " tokens, "
      << corpus_source_name(c.source) << ") to " << path << '\n';
  return 0;
}

int cmd_train_base(const RunConfig& cfg, std::ostream& out) {
  const Corpus corpus = load_corpus(need_path(cfg.paths.corpus, "paths.corpus"));
  const fs::path dir = need_path(cfg.paths.out, "paths.out");
  auto res = train_base<float>(corpus, cfg.base, cfg.train);
  save_base(res.model, dir);
  const std::size_t total = cfg.train.total_steps(corpus.size());
  emit_report(loss_report(cfg, res.losses, total), cfg.format, dir / ("losses" + ext(cfg.format)));
  out << "trained base for " << res.losses.size() << " steps, loss " << format6(res.losses.front()) << " -> "
      << format6(res.losses.back()) << "; checkpoint " << dir.string() << '\n';
  return 0;
}

int cmd_distill(const RunConfig& cfg, std::ostream& out) {
  const auto base = load_base<float>(need_path(cfg.paths.base, "paths.base"));
  const Corpus source = load_corpus(need_path(cfg.paths.corpus, "paths.corpus"));
  const std::string path = need_path(cfg.paths.out, "paths.out");
  auto prompts = corpus_prompts(source, cfg.distill.prompts, cfg.distill.prompt_len);
  Corpus distilled = self_distill(base, prompts, cfg.distill.max_len);
  save_corpus(distilled, path);
  out << "distilled " << distilled.size() << " entries to " << path << '\n';
  return 0;
}

int cmd_train_draft(const RunConfig& cfg, std::ostream& out) {
  const auto base = load_base<float>(need_path(cfg.paths.base, "paths.base"));
  const Corpus corpus = load_corpus(need_path(cfg.paths.corpus, "paths.corpus"));
  const fs::path dir = need_path(cfg.paths.out, "paths.out");
  SpecFormerConfig sc = cfg.draft;
  sc.hidden = base.config().hidden;
  sc.rope_base = base.config().rope_base;
  auto res = train_draft<float>(base, sc, corpus, cfg.train, [&](std::size_t epoch, const SpecFormer<float>& sf) {
    save_draft(sf, dir);
    out << "epoch " << epoch << " checkpoint " << dir.string() << '\n';
  });
  save_draft(res.model, dir);
  const std::size_t total = cfg.train.total_steps(corpus.size());
  emit_report(loss_report(cfg, res.losses, total), cfg.format, dir / ("losses" + ext(cfg.format)));
  out << "trained draft for " << res.losses.size() << " steps, loss " << format6(res.losses.front()) << " -> "
      << format6(res.losses.back()) << '\n';
  return 0;
}

int cmd_decode(const RunConfig& cfg, std::ostream& out) {
  const auto base = load_base<float>(need_path(cfg.paths.base, "paths.base"));
  write_tokens(decode_greedy(base, cfg.decode.prompt, cfg.decode.n), cfg.paths.out, out);
  return 0;
}

int cmd_sd_decode(const RunConfig& cfg, std::ostream& out) {
  auto base = load_base<float>(need_path(cfg.paths.base, "paths.base"));
  base.set_trainable(false);
  const auto sf = load_draft<float>(need_path(cfg.paths.draft, "paths.draft"));
  auto res = sd_decode(base, sf, cfg.decode.prompt, cfg.decode.n, cfg.decode.k);
  write_tokens(res.tokens, cfg.paths.out, out);
  print_stats(res.stats, out);
  return 0;
}

int cmd_bench(const RunConfig& cfg, std::ostream& out) {
  BaseLM<float> base = cfg.paths.base.empty() ? BaseLM<float>::init(cfg.base, derive_seed(cfg.seed, "bench.base"))
                                              : load_base<float>(cfg.paths.base);
  base.set_trainable(false);
  std::optional<SpecFormer<float>> trained;
  if (!cfg.paths.draft.empty()) trained = load_draft<float>(cfg.paths.draft);
  std::optional<Corpus> corpus;
  if (!cfg.paths.corpus.empty()) corpus = load_corpus(cfg.paths.corpus);

  SpecFormerConfig sc = trained ? trained->config() : cfg.draft;
  sc.hidden = base.config().hidden;
  sc.rope_base = base.config().rope_base;
  const std::size_t l_d = sc.l_d;
  const std::size_t k = cfg.decode.k ? cfg.decode.k : l_d;

  std::vector<std::string> cols{"seed_index", "prompts", "n", "l_d", "k", "steps", "tokens_emitted", "a", "kappa"};
  for (std::size_t m = 0; m <= l_d; ++m) cols.push_back("matched_" + std::to_string(m));
  cols.push_back("base_forwards");
  cols.push_back("lossless");
  Report report = make_report(cfg, cols);

  bool all_lossless = true;
  std::vector<AcceptanceStats> every;
  for (std::size_t si = 0; si < cfg.bench.seeds; ++si) {
    const std::uint64_t s = derive_seed(cfg.seed, "bench.seed." + std::to_string(si));
    const SpecFormer<float> sf = trained ? *trained : SpecFormer<float>::init(sc, derive_seed(s, "draft"));
    Prng rng(derive_seed(s, "prompts"));
    std::vector<std::vector<Token>> prompts;
    for (std::size_t p = 0; p < cfg.bench.prompts; ++p) {
      if (corpus) {
        const auto& e = corpus->entries[rng.uniform_int(corpus->size())];
        const std::size_t len = std::min(cfg.bench.prompt_len, e.size());
        prompts.emplace_back(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(len));
      } else {
        std::vector<Token> prompt(cfg.bench.prompt_len);
        for (auto& t : prompt) t = static_cast<Token>(rng.uniform_int(base.config().vocab));
        prompts.push_back(std::move(prompt));
      }
    }
    auto results = sd_decode_sessions(base, sf, prompts, cfg.bench.n, k, cfg.bench.threads);
    bool lossless = true;
    std::vector<AcceptanceStats> stats;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      lossless = lossless && results[p].tokens == decode_greedy(base, prompts[p], cfg.bench.n);
      stats.push_back(results[p].stats);
    }
    all_lossless = all_lossless && lossless;
    const AcceptanceStats m = merge_stats(stats);
    every.push_back(m);
    // a and kappa are recomputed from the integer columns so the table is
    // self-consistent after rounding.
    const double a = static_cast<double>(m.tokens_emitted) / static_cast<double>(m.steps);
    std::vector<Cell> row{static_cast<std::int64_t>(si),
                          static_cast<std::int64_t>(prompts.size()),
                          static_cast<std::int64_t>(cfg.bench.n),
                          static_cast<std::int64_t>(l_d),
                          static_cast<std::int64_t>(k),
                          static_cast<std::int64_t>(m.steps),
                          static_cast<std::int64_t>(m.tokens_emitted),
                          a,
                          kappa(a, static_cast<double>(l_d), static_cast<double>(k))};
    for (auto h : m.histogram) row.emplace_back(static_cast<std::int64_t>(h));
    row.emplace_back(static_cast<std::int64_t>(m.base_forwards));
    row.emplace_back(static_cast<std::int64_t>(lossless ? 1 : 0));
    report.add_row(std::move(row));
  }
  emit_or_print(report, cfg, cfg.paths.out, out);
  const AcceptanceStats total = merge_stats(every);
  out << "overall ";
  print_stats(total, out);
  out << (all_lossless ? "lossless: all sessions match greedy decoding\n"
                       : "LOSSY: some session differs from greedy decoding\n");
  return all_lossless ? 0 : 1;
}

int cmd_roofline(const RunConfig& cfg, std::ostream& out) {
  const ChipSpec chip = resolve_chip(cfg.roofline.chip);
  RooflineInputs in;
  in.params = cfg.roofline.model_params;
  in.bytes_per_param = cfg.roofline.bytes_per_param;
  in.a = cfg.roofline.a;
  in.k = cfg.roofline.k;
  in.l_d = cfg.roofline.l_d;
  in.m_s = cfg.roofline.m_s;
  in.m_p = cfg.roofline.m_p;
  in.bs = cfg.roofline.bs;
  const RooflineReport rr = roofline_report(chip, in);

  Report table = make_report(cfg, {"metric", "value"});
  table.add_row({std::string("ai_m"), rr.ai_m});
  table.add_row({std::string("ai_c"), rr.ai_c});
  table.add_row({std::string("rho"), rr.rho});
  table.add_row({std::string("p"), rr.p});
  table.add_row({std::string("r1"), rr.r1});
  table.add_row({std::string("r2"), rr.r2});
  table.add_row({std::string("bs"), rr.bs});
  table.add_row({std::string("feasible"), static_cast<std::int64_t>(rr.feasible ? 1 : 0)});

  Report curve = make_report(cfg, {"tokens_in_flight", "throughput"});
  for (const auto& pt : roofline_curve(chip, in.params, in.bytes_per_param, cfg.roofline.max_tokens)) {
    curve.add_row({static_cast<std::int64_t>(pt.tokens), pt.throughput});
  }

  char line[160];
  out << "chip " << chip.name << '\n';
  std::snprintf(line, sizeof line, "ai_m=%.4g ai_c=%.2f rho=%.2f p=%.4g r1=%.4g r2=%.4g bs=%g feasible=%s\n",
                rr.ai_m, rr.ai_c, rr.rho, rr.p, rr.r1, rr.r2, rr.bs, rr.feasible ? "yes" : "no");
  out << line;
  if (!cfg.paths.out.empty()) {
    emit_report(table, cfg.format, cfg.paths.out);
    const fs::path curve_path = cfg.paths.out + ".curve" + ext(cfg.format);
    emit_report(curve, cfg.format, curve_path);
    out << "report: " << cfg.paths.out << "\ncurve: " << curve_path.string() << '\n';
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  const auto results = run_gradcheck_suite(cfg.seed, cfg.gradcheck.points, cfg.gradcheck.tolerance);
  Report r = make_report(cfg, {"check", "point", "rel_error", "pass"});
  bool ok = true;
  for (const auto& g : results) {
    r.add_row({g.name, static_cast<std::int64_t>(g.point), g.rel_error, static_cast<std::int64_t>(g.pass)});
    ok = ok && g.pass;
  }
  emit_or_print(r, cfg, cfg.paths.out, out);
  out << (ok ? "all gradient checks passed\n" : "GRADIENT CHECK FAILED\n");
  return ok ? 0 : 1;
}

using Command = std::function<int(const RunConfig&, std::ostream&)>;

const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table{
      {"gen-corpus", cmd_gen_corpus}, {"train-base", cmd_train_base}, {"distill", cmd_distill},
      {"train-draft", cmd_train_draft}, {"decode", cmd_decode},       {"sd-decode", cmd_sd_decode},
      {"bench", cmd_bench},           {"roofline", cmd_roofline},     {"gradcheck", cmd_gradcheck},
  };
  return table;
}

}  // namespace

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"gen-corpus", "train-base", "distill",  "train-draft", "decode",
                                              "sd-decode",  "bench",      "roofline", "gradcheck"};
  return names;
}

int run(const std::string& subcommand, const RunConfig& cfg, std::ostream& out) {
  auto it = commands().find(subcommand);
  if (it == commands().end()) throw ParameterError("unknown subcommand '" + subcommand + "'");
  cfg.validate();
  return it->second(cfg, out);
}

}  // namespace specdraft::cli
