#include "specdraft/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "specdraft/errors.hpp"
#include "specdraft/prng.hpp"

namespace specdraft {

const char* corpus_source_name(CorpusSource s) {
  switch (s) {
    case CorpusSource::kSynthetic: return "synthetic";
    case CorpusSource::kIngested: return "ingested";
    case CorpusSource::kDistilled: return "distilled";
  }
  return "synthetic";
}

CorpusSource parse_corpus_source(const std::string& name) {
  if (name == "synthetic") return CorpusSource::kSynthetic;
  if (name == "ingested") return CorpusSource::kIngested;
  if (name == "distilled") return CorpusSource::kDistilled;
  throw ParameterError("unknown corpus source '" + name + "'");
}

const char* corpus_kind_name(CorpusKind k) {
  switch (k) {
    case CorpusKind::kCycle: return "cycle";
    case CorpusKind::kAffine: return "affine";
    case CorpusKind::kMarkov: return "markov";
  }
  return "cycle";
}

CorpusKind parse_corpus_kind(const std::string& name) {
  if (name == "cycle") return CorpusKind::kCycle;
  if (name == "affine") return CorpusKind::kAffine;
  if (name == "markov") return CorpusKind::kMarkov;
  throw ParameterError("unknown corpus kind '" + name + "' (expected cycle, affine or markov)");
}

void Corpus::validate() const {
  if (vocab < 2) throw ParameterError("corpus vocab must be at least 2");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.size() < 2) throw DimensionError("corpus entry " + std::to_string(i) + " is shorter than 2 tokens");
    for (Token t : e) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw ParameterError("corpus entry " + std::to_string(i) + " has token " + std::to_string(t) +
                             " outside vocab " + std::to_string(vocab));
      }
    }
  }
}

std::size_t Corpus::total_tokens() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.size();
  return n;
}

void CorpusSpec::validate() const {
  if (vocab < 4) throw ParameterError("corpus vocab must be at least 4");
  if (seq_len < 2) throw ParameterError("corpus seq_len must be at least 2");
  if (kind == CorpusKind::kCycle && (period < 2 || period > vocab)) {
    throw ParameterError("cycle period must be in [2, vocab]");
  }
  if (kind == CorpusKind::kMarkov) {
    if (branching < 1 || branching > vocab) throw ParameterError("markov branching must be in [1, vocab]");
    if (!(top_probability > 0.0 && top_probability <= 1.0)) {
      throw ParameterError("markov top_probability must be in (0, 1]");
    }
  }
}

std::vector<std::vector<double>> markov_table(std::size_t vocab, std::size_t branching, double top_probability,
                                              std::uint64_t seed) {
  Prng rng(derive_seed(seed, "markov.table"));
  std::vector<std::vector<double>> table(vocab, std::vector<double>(vocab, 0.0));
  std::vector<std::size_t> ids(vocab);
  for (std::size_t s = 0; s < vocab; ++s) {
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `branching` ids become successors.
    for (std::size_t i = 0; i < branching; ++i) std::swap(ids[i], ids[i + rng.uniform_int(vocab - i)]);
    if (branching == 1) {
      table[s][ids[0]] = 1.0;
      continue;
    }
    table[s][ids[0]] = top_probability;
    std::vector<double> rest(branching - 1);
    double total = 0.0;
    for (auto& w : rest) total += (w = 0.5 + rng.uniform());
    for (std::size_t i = 1; i < branching; ++i) table[s][ids[i]] = (1.0 - top_probability) * rest[i - 1] / total;
  }
  return table;
}

namespace {

Token sample_row(const std::vector<double>& row, Prng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i] <= 0.0) continue;
    last_nonzero = i;
    acc += row[i];
    if (u < acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(last_nonzero);
}

}  // namespace

Corpus gen_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.vocab = spec.vocab;
  c.source = CorpusSource::kSynthetic;
  c.entries.resize(spec.size);
  const std::uint64_t V = spec.vocab;

  switch (spec.kind) {
    case CorpusKind::kCycle: {
      Prng motif_rng(derive_seed(spec.seed, "cycle.motif"));
      std::vector<Token> pool(V);
      std::iota(pool.begin(), pool.end(), Token{0});
      for (std::size_t i = 0; i < spec.period; ++i) std::swap(pool[i], pool[i + motif_rng.uniform_int(V - i)]);
      const std::vector<Token> motif(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.period));
      for (std::size_t e = 0; e < spec.size; ++e) {
        Prng rng(derive_seed(spec.seed, "cycle.entry." + std::to_string(e)));
        const std::size_t phase = rng.uniform_int(spec.period);
        auto& entry = c.entries[e];
        entry.resize(spec.seq_len);
        for (std::size_t t = 0; t < spec.seq_len; ++t) entry[t] = motif[(phase + t) % spec.period];
      }
      break;
    }
    case CorpusKind::kAffine: {
      Prng coef_rng(derive_seed(spec.seed, "affine.coefficients"));
      const std::uint64_t a = spec.affine_a.value_or(1 + 2 * coef_rng.uniform_int(V / 2)) % V;
      const std::uint64_t b = spec.affine_b.value_or(1 + coef_rng.uniform_int(V - 1)) % V;
      for (std::size_t e = 0; e < spec.size; ++e) {
        Prng rng(derive_seed(spec.seed, "affine.entry." + std::to_string(e)));
        std::uint64_t x = rng.uniform_int(V);
        auto& entry = c.entries[e];
        entry.resize(spec.seq_len);
        for (std::size_t t = 0; t < spec.seq_len; ++t) {
          entry[t] = static_cast<Token>(x);
          x = (a * x + b) % V;
        }
      }
      break;
    }
    case CorpusKind::kMarkov: {
      const auto table = markov_table(spec.vocab, spec.branching, spec.top_probability, spec.seed);
      for (std::size_t e = 0; e < spec.size; ++e) {
        Prng rng(derive_seed(spec.seed, "markov.entry." + std::to_string(e)));
        auto& entry = c.entries[e];
        entry.resize(spec.seq_len);
        entry[0] = static_cast<Token>(rng.uniform_int(V));
        for (std::size_t t = 1; t < spec.seq_len; ++t) entry[t] = sample_row(table[entry[t - 1]], rng);
      }
      break;
    }
  }
  return c;
}

Corpus ingest_text(std::span<const unsigned char> bytes, std::size_t vocab, std::size_t seq_len) {
  if (vocab < 2) throw ParameterError("ingest vocab must be at least 2");
  if (seq_len < 2) throw ParameterError("ingest seq_len must be at least 2");
  Corpus c;
  c.vocab = vocab;
  c.source = CorpusSource::kIngested;
  for (std::size_t i = 0; i < bytes.size(); i += seq_len) {
    const std::size_t end = std::min(bytes.size(), i + seq_len);
    if (end - i < 2) break;
    std::vector<Token> entry;
    entry.reserve(end - i);
    for (std::size_t j = i; j < end; ++j) entry.push_back(static_cast<Token>(bytes[j] % vocab));
    c.entries.push_back(std::move(entry));
  }
  return c;
}

Corpus ingest_text_file(const std::filesystem::path& path, std::size_t vocab, std::size_t seq_len) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read text file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return ingest_text(bytes, vocab, seq_len);
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  corpus.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write corpus " + path.string());
  f << "vocab=" << corpus.vocab << " count=" << corpus.entries.size()
    << " source=" << corpus_source_name(corpus.source) << '\n';
  for (const auto& e : corpus.entries) {
    for (std::size_t i = 0; i < e.size(); ++i) f << (i ? " " : "") << e[i];
    f << '\n';
  }
  if (!f) throw IoError("failed while writing corpus " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read corpus " + path.string());
  std::string header;
  if (!std::getline(f, header)) throw IoError("corpus " + path.string() + " is empty");

  Corpus c;
  std::optional<std::size_t> count;
  std::istringstream hs(header);
  std::string field;
  while (hs >> field) {
    auto eq = field.find('=');
    if (eq == std::string::npos) throw IoError("malformed corpus header field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    try {
      if (key == "vocab") {
        c.vocab = std::stoul(value);
      } else if (key == "count") {
        count = std::stoul(value);
      } else if (key == "source") {
        c.source = parse_corpus_source(value);
      } else {
        throw IoError("unknown corpus header key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw IoError("corpus header value for '" + key + "' is not a number");
    }
  }
  if (c.vocab == 0 || !count) throw IoError("corpus header must carry vocab=V count=N");

  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<Token> entry;
    long long v = 0;
    while (ls >> v) entry.push_back(static_cast<Token>(v));
    if (!ls.eof()) throw IoError("corpus line " + std::to_string(c.entries.size() + 2) + " has a non-integer token");
    c.entries.push_back(std::move(entry));
  }
  if (c.entries.size() != *count) {
    throw IoError("corpus header says " + std::to_string(*count) + " entries but file has " +
                  std::to_string(c.entries.size()));
  }
  c.validate();
  return c;
}

}  // namespace specdraft
