#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "cli/commands.hpp"
#include "cli/config.hpp"
#include "cli/report.hpp"
#include "specdraft/checkpoint.hpp"
#include "support.hpp"

namespace specdraft::cli {
namespace {

using specdraft::testing::TempDir;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Config

TEST(Config, EmptyDocumentKeepsDefaults) {
  const RunConfig defaults;
  EXPECT_EQ(parse_config_text("", {}).canonical(), defaults.canonical());
  EXPECT_EQ(parse_config_text("# nothing here\n", {}).digest(), defaults.digest());
  EXPECT_EQ(defaults.digest().size(), 16u);
}

TEST(Config, OverridesBeatTheFileAndTheFileBeatsDefaults) {
  const std::string yaml = "seed: 9\nbase:\n  layers: 6\ndraft:\n  l_d: 3\n";
  auto cfg = parse_config_text(yaml, {});
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.base.layers, 6u);
  EXPECT_EQ(cfg.draft.l_d, 3u);
  cfg = parse_config_text(yaml, {"draft.l_d=5", "base.layers=8", "draft.l_d=2"});
  EXPECT_EQ(cfg.draft.l_d, 2u);
  EXPECT_EQ(cfg.base.layers, 8u);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_NE(cfg.digest(), parse_config_text(yaml, {}).digest());
}

TEST(Config, DraftWidthFollowsTheBase) {
  auto cfg = parse_config_text("base:\n  hidden: 32\n  rope_base: 500\n", {});
  EXPECT_EQ(cfg.draft.hidden, 32u);
  EXPECT_EQ(cfg.draft.rope_base, 500.0);
}

TEST(Config, ErrorsNameTheOffendingKey) {
  auto key_of = [](const std::string& yaml, std::vector<std::string> overrides) {
    try {
      parse_config_text(yaml, overrides);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  EXPECT_EQ(key_of("draft:\n  l_d: 0\n", {}), "draft.l_d");
  EXPECT_EQ(key_of("", {"draft.l_d=0"}), "draft.l_d");
  EXPECT_EQ(key_of("base:\n  colour: red\n", {}), "base.colour");
  EXPECT_EQ(key_of("", {"base.layers=many"}), "base.layers");
  EXPECT_EQ(key_of("", {"nonsense=1"}), "nonsense");
  EXPECT_EQ(key_of("", {"base.hidden=30"}), "base.heads");  // 30 is not divisible by 4 heads
  EXPECT_THROW(parse_config("/nonexistent/run.yaml", {}), IoError);
}

TEST(Config, LeafNamesResolveWhenUnique) {
  EXPECT_EQ(resolve_key("max_lr"), "train.max_lr");
  EXPECT_THROW(resolve_key("l_d"), ConfigError);  // draft.l_d and roofline.l_d
  EXPECT_EQ(resolve_key("train.steps"), "train.steps");
    EXPECT_THROW(resolve_key("zzz"), ConfigError);
}

TEST(Config, SetThenGetRoundTripsEveryKey) {
  RunConfig cfg;
  for (const auto& key : config_keys()) {
    const std::string v = get_value(cfg, key);
    RunConfig copy = cfg;
    set_value(copy, key, v);
    EXPECT_EQ(get_value(copy, key), v) << key;
  }
}

TEST(Config, ShippedDeskConfigMatchesBuiltInArchitecture) {
  auto cfg = parse_config(SPECDRAFT_CONFIG_DIR "/desk.yaml", {});
  const RunConfig defaults;
  EXPECT_EQ(cfg.base, defaults.base);
  EXPECT_EQ(cfg.draft, defaults.draft);
  EXPECT_EQ(cfg.train.epochs, 10u);
}

TEST(Config, TokenListsParse) {
  EXPECT_EQ(parse_tokens("1 2,3  4"), (std::vector<Token>{1, 2, 3, 4}));
  EXPECT_EQ(format_tokens({5, 0, 7}), "5 0 7");
  EXPECT_THROW(parse_tokens("1 x"), ParameterError);
  auto cfg = parse_config_text("decode:\n  prompt: [3, 1, 4]\n", {});
  EXPECT_EQ(cfg.decode.prompt, (std::vector<Token>{3, 1, 4}));
}

// Reports

TEST(Report, EmptyCsvHasOnlyTheHeader) {
  TempDir dir("report");
  Report r;
  r.columns = {"a", "b"};
  emit_report(r, ReportFormat::kCsv, dir / "r.csv");
  EXPECT_EQ(slurp(dir / "r.csv"), "a,b\n");
  EXPECT_TRUE(std::filesystem::exists(dir / "r.csv.meta.json"));
}

TEST(Report, JsonLinesRoundTripAtSixDigits) {
  TempDir dir("report");
  Report r;
  r.columns = {"name", "count", "value"};
  r.add_row({std::string("x"), std::int64_t{3}, 1.0 / 3.0});
  r.add_row({std::string("y"), std::int64_t{-1}, 123456789.0});
  emit_report(r, ReportFormat::kJsonLines, dir / "r.jsonl");
  auto rows = parse_json_lines(dir / "r.jsonl", r.columns);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(std::get<std::string>(rows[0][0]), "x");
  EXPECT_EQ(std::get<std::int64_t>(rows[0][1]), 3);
  EXPECT_EQ(std::get<double>(rows[0][2]), round6(1.0 / 3.0));
  EXPECT_EQ(std::get<double>(rows[1][2]), 123457000.0);
  EXPECT_THROW(r.add_row({std::int64_t{1}}), DimensionError);
}

TEST(Report, RoundSixKeepsSignificantDigits) {
  EXPECT_EQ(round6(0.1234564), 0.123456);
  EXPECT_EQ(round6(-2.5), -2.5);
  EXPECT_EQ(round6(0.0), 0.0);
  EXPECT_EQ(format6(152.859), "152.859");
}

TEST(Commands, ListsEverySubcommand) {
  const std::vector<std::string> expected{"gen-corpus", "train-base", "distill",  "train-draft", "decode",
                                          "sd-decode",  "bench",      "roofline", "gradcheck"};
  auto names = subcommands();
  std::sort(names.begin(), names.end());
  auto sorted = expected;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(names, sorted);
  std::ostringstream out;
  EXPECT_THROW(run("nope", RunConfig{}, out), ParameterError);
}

TEST(Commands, BenchColumnsReproduceAcceptanceStatistics) {
  TempDir dir("bench");
  auto cfg = parse_config_text("", {"base.hidden=16", "base.heads=2", "base.ffn=32", "base.vocab=16",
                                    "draft.l_d=3", "draft.heads=2", "draft.ffn=32", "bench.seeds=3",
                                    "bench.prompts=2", "bench.n=20", "format=json-lines",
                                    "paths.out=" + (dir / "b.jsonl").string()});
  std::ostringstream out;
  ASSERT_EQ(run("bench", cfg, out), 0);
  const std::vector<std::string> cols{"seed_index", "prompts", "n", "l_d", "k", "steps", "tokens_emitted", "a",
                                      "kappa", "matched_0", "matched_1", "matched_2", "matched_3",
                                      "base_forwards", "lossless"};
  auto rows = parse_json_lines(dir / "b.jsonl", cols);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& row : rows) {
    const double steps = static_cast<double>(std::get<std::int64_t>(row[5]));
    const double emitted = static_cast<double>(std::get<std::int64_t>(row[6]));
    const double k = static_cast<double>(std::get<std::int64_t>(row[4]));
    const double a = std::get<double>(row[7]);
    EXPECT_EQ(a, round6(emitted / steps));
    EXPECT_EQ(std::get<double>(row[8]), round6((emitted / steps) * 3.0 / k));
    std::int64_t hist = 0;
    for (int j = 9; j <= 12; ++j) hist += std::get<std::int64_t>(row[j]);
    EXPECT_EQ(hist, static_cast<std::int64_t>(steps));
    EXPECT_EQ(std::get<std::int64_t>(row[14]), 1);
  }
}

// End to end through the built binary.

int sh(const std::string& cmd) { return std::system((cmd + " >/dev/null 2>&1").c_str()); }

std::string capture(const std::string& cmd, const std::filesystem::path& tmp) {
  const auto file = tmp / "stdout.txt";
  if (std::system((cmd + " >" + file.string() + " 2>&1").c_str()) != 0) return "exit status nonzero";
  return slurp(file);
}

const std::string kBin = SPECDRAFT_CLI_BIN;
const std::string kTiny =
    " --set base.hidden=16 --set base.heads=2 --set base.ffn=32 --set base.vocab=16"
    " --set draft.heads=2 --set draft.ffn=32 --set draft.l_d=3";

TEST(EndToEnd, RooflinePrintsTheCrossover) {
  TempDir dir("e2e");
  const auto text = capture(kBin + " roofline --chip a100 --model-params 7e9 --out " + (dir / "r.csv").string(),
                            dir.path());
  EXPECT_NE(text.find("ai_m=1"), std::string::npos) << text;
  EXPECT_NE(text.find("rho=152.86"), std::string::npos) << text;
  EXPECT_TRUE(std::filesystem::exists(dir / "r.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "r.csv.curve.csv"));
}

TEST(EndToEnd, ExitCodesSeparateConfigAndIoErrors) {
  TempDir dir("e2e");
  EXPECT_EQ(WEXITSTATUS(sh(kBin + " decode --set draft.l_d=0")), 2);
  EXPECT_EQ(WEXITSTATUS(sh(kBin + " decode --base " + (dir / "missing").string())), 3);
  EXPECT_NE(WEXITSTATUS(sh(kBin)), 0);
}

TEST(EndToEnd, PipelineIsLosslessAndBenchIsReproducible) {
  TempDir dir("e2e");
  const std::string d = dir.path().string();
  const std::string common = kTiny + " --seed 3 --set corpus.period=5 --set corpus.size=32";
  ASSERT_EQ(sh(kBin + " gen-corpus" + common + " --out " + d + "/c.txt"), 0);
  ASSERT_EQ(sh(kBin + " train-base" + common + " --corpus " + d + "/c.txt --set train.steps=40 --set "
               "train.seq_len=24 --out " + d + "/base"), 0);
  ASSERT_TRUE(std::filesystem::exists(dir / "base"));
  ASSERT_EQ(sh(kBin + " train-draft" + common + " --corpus " + d + "/c.txt --base " + d +
               "/base --set train.steps=20 --set train.seq_len=24 --out " + d + "/draft"), 0);
  const std::string dec = common + " --base " + d + "/base --prompt '1 2 3 4' --n 30";
  ASSERT_EQ(sh(kBin + " decode" + dec + " --out " + d + "/greedy.txt"), 0);
  ASSERT_EQ(sh(kBin + " sd-decode" + dec + " --draft " + d + "/draft --out " + d + "/sd.txt"), 0);
  EXPECT_FALSE(slurp(dir / "greedy.txt").empty());
  EXPECT_EQ(slurp(dir / "greedy.txt"), slurp(dir / "sd.txt"));

  const std::string bench = kBin + " bench" + common + " --base " + d + "/base --draft " + d +
                            "/draft --seeds 10 --set bench.n=24 --out ";
  ASSERT_EQ(sh(bench + d + "/b1.csv"), 0);
  ASSERT_EQ(sh(bench + d + "/b2.csv"), 0);
  const auto first = slurp(dir / "b1.csv");
  EXPECT_EQ(first, slurp(dir / "b2.csv"));
  EXPECT_EQ(std::count(first.begin(), first.end(), '\n'), 11);
}

}  // namespace
}  // namespace specdraft::cli
