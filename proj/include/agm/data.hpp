// Corpora: synthetic domain-shift generation with planted spurious tokens,
// a fixed whitespace vocabulary, JSONL ingestion and split discipline.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace agm {

struct Example {
  std::string id;  // unique across a suite: "<domain>:<index>"
  std::vector<int> tokens;  // tokens[0] == CLS
  std::string text;
  int label = 0;
  std::string domain;
};

// +1 pushes toward label 1, -1 toward label 0.
struct DirectedToken {
  std::string word;
  int direction = 1;
};

struct DomainSpec {
  std::string name;
  std::vector<DirectedToken> invariant_tokens;  // shared across the suite
  std::vector<DirectedToken> spurious_tokens;   // private to this domain
  std::vector<std::string> filler_tokens;       // label-independent
  double spurious_strength = 0.9;               // rho in [0.5, 1]
  int min_length = 8;                           // content tokens, excl. CLS
  int max_length = 16;
  // Probability that an example also carries one invariant token of the
  // opposite direction (a mixed-sentiment distractor).
  double noise_rate = 0.1;
};

struct SplitSpec {
  int train = 1000;
  int validation = 200;
  int test = 300;
  int ads_heldout = 50;

  int total() const { return train + validation + test + ads_heldout; }
};

struct DomainSplits {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
  std::vector<Example> ads;
};

// Special ids 0..3 are reserved; word i of the vocabulary file has id i + 4.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  // Lexicon words first (in order, deduplicated), then the most frequent
  // whitespace tokens of `texts` (ties lexicographic) up to `capacity` ids
  // including the specials.
  static Vocabulary build(std::span<const std::string> lexicon,
                          std::span<const std::string> texts, int capacity);

  int id(const std::string& word) const;  // UNK when absent
  const std::string& word(int id) const;
  int size() const;  // including specials
  const std::vector<std::string>& words() const { return words_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Lowercase, whitespace split, CLS prefix, UNK fallback, truncated to
// max_seq_len tokens in total.
class Tokenizer {
 public:
  Tokenizer(Vocabulary vocab, int max_seq_len);
  std::vector<int> encode(const std::string& text) const;
  std::string token_string(int id) const;
  const Vocabulary& vocabulary() const { return vocab_; }
  int max_seq_len() const { return max_seq_len_; }

 private:
  Vocabulary vocab_;
  int max_seq_len_;
};

// Balanced labels (floor(n/2) negatives, ceil(n/2) positives, shuffled);
// deterministic in (spec, seed). `id_prefix` defaults to spec.name.
std::vector<Example> generate_domain(const DomainSpec& spec, int n,
                                     std::uint64_t seed,
                                     const Tokenizer& tokenizer);

// Throws ConfigError when two specs share a spurious word, or a spurious word
// is also invariant.
void validate_suite(std::span<const DomainSpec> specs);

// Four domains in the styles long/structured, mid-length, focused-topic and
// short/noisy. `rho` is applied to every domain.
std::vector<DomainSpec> default_suite(double rho = 0.9);

// All words any spec can emit, in a stable order.
std::vector<std::string> suite_lexicon(std::span<const DomainSpec> specs);

// JSONL: one {"text", "label", "domain"} record per line; an optional "id"
// is kept, otherwise "<domain>:<line index>" is used. Blank lines are
// skipped. Errors name the 1-based line number.
std::vector<Example> ingest_jsonl(const std::filesystem::path& path,
                                  const std::string& domain_name,
                                  const Tokenizer& tokenizer);
void write_jsonl(const std::filesystem::path& path,
                 std::span<const Example> examples);
std::string to_jsonl_line(const Example& e);

// The ADS hold-out is drawn first; the rest is shuffled and partitioned.
// Each split is label-stratified so |#pos - #neg| <= 1.
DomainSplits make_splits(std::span<const Example> examples,
                         const SplitSpec& spec, std::uint64_t seed);

// Full-size splits (10000/2000/3000/500) divided by `divisor`.
SplitSpec scaled_split_spec(int divisor);

struct Domain {
  std::string name;
  DomainSplits splits;
};

struct SyntheticSuite {
  Tokenizer tokenizer;
  std::vector<Domain> domains;
};

// Validates `specs`, builds the vocabulary from their lexicon, then generates
// split.total() examples per domain and splits them. Domain i uses seeds
// derived from (seed, i).
SyntheticSuite generate_suite(std::span<const DomainSpec> specs,
                              const SplitSpec& split, std::uint64_t seed,
                              int vocab_capacity = 1000, int max_seq_len = 64);

}  // namespace agm
