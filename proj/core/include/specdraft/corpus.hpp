#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "specdraft/tensor.hpp"

namespace specdraft {

enum class CorpusSource { kSynthetic, kIngested, kDistilled };
enum class CorpusKind { kCycle, kAffine, kMarkov };

const char* corpus_source_name(CorpusSource s);
CorpusSource parse_corpus_source(const std::string& name);
const char* corpus_kind_name(CorpusKind k);
CorpusKind parse_corpus_kind(const std::string& name);

struct Corpus {
  std::size_t vocab = 0;
  std::vector<std::vector<Token>> entries;
  CorpusSource source = CorpusSource::kSynthetic;

  /// Throws unless every token is in [0, vocab) and every entry has length >= 2.
  void validate() const;
  std::size_t size() const noexcept { return entries.size(); }
  std::size_t total_tokens() const noexcept;
};

struct CorpusSpec {
  CorpusKind kind = CorpusKind::kCycle;
  std::size_t size = 256;
  std::size_t seq_len = 64;
  std::size_t vocab = 64;
  std::uint64_t seed = 0;
  /// cycle: motif length q (2 <= q <= vocab).
  std::size_t period = 8;
  /// affine: x_{t+1} = (a x_t + b) mod V; drawn from the seed when unset.
  std::optional<std::uint64_t> affine_a;
  std::optional<std::uint64_t> affine_b;
  /// markov: number of successors per state and the probability mass of the
  /// most likely one.
  std::size_t branching = 4;
  double top_probability = 0.6;

  void validate() const;
};

/// Deterministic synthetic corpus. `cycle` repeats one random motif of
/// distinct tokens from a random phase; `affine` iterates an affine map from
/// a random start; `markov` walks a fixed random transition table.
Corpus gen_corpus(const CorpusSpec& spec);

/// Row-stochastic (V x V) transition table used by the markov corpus.
std::vector<std::vector<double>> markov_table(std::size_t vocab, std::size_t branching, double top_probability,
                                              std::uint64_t seed);

/// Maps bytes to ids modulo V and cuts them into entries of seq_len tokens;
/// a trailing piece shorter than 2 tokens is dropped.
Corpus ingest_text(std::span<const unsigned char> bytes, std::size_t vocab, std::size_t seq_len);
Corpus ingest_text_file(const std::filesystem::path& path, std::size_t vocab, std::size_t seq_len);

/// Header `vocab=V count=N [source=S]`, then one entry per line as
/// space-separated decimal ids.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace specdraft
