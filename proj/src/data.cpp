#include "agm/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "agm/errors.hpp"
#include "agm/model.hpp"

namespace agm {

namespace {

const std::vector<std::string> kSpecialStrings = {"[PAD]", "[CLS]", "[MASK]",
                                                  "[UNK]"};

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::vector<DirectedToken> directed(const std::vector<std::string>& pos,
                                    const std::vector<std::string>& neg) {
  std::vector<DirectedToken> out;
  for (const auto& w : pos) out.push_back({w, 1});
  for (const auto& w : neg) out.push_back({w, -1});
  return out;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    auto [it, inserted] =
        index_.emplace(words_[i], static_cast<int>(i) + special::kCount);
    if (!inserted) throw SchemaError("duplicate vocabulary word: " + words_[i]);
  }
}

Vocabulary Vocabulary::build(std::span<const std::string> lexicon,
                             std::span<const std::string> texts,
                             int capacity) {
  const int room = capacity - special::kCount;
  if (room <= 0) throw ConfigError("vocabulary capacity too small");
  std::vector<std::string> words;
  std::set<std::string> seen;
  for (const auto& w : lexicon) {
    const auto lw = lowercase(w);
    if (seen.insert(lw).second) words.push_back(lw);
  }
  if (static_cast<int>(words.size()) > room) {
    throw ConfigError("lexicon exceeds vocabulary capacity");
  }
  std::map<std::string, long> counts;
  for (const auto& t : texts) {
    for (const auto& w : split_whitespace(lowercase(t))) {
      if (!seen.count(w)) ++counts[w];
    }
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, c] : ranked) {
    if (static_cast<int>(words.size()) >= room) break;
    words.push_back(w);
  }
  return Vocabulary(std::move(words));
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? special::kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (special::is_special(id)) return kSpecialStrings[static_cast<std::size_t>(id)];
  const auto i = static_cast<std::size_t>(id - special::kCount);
  if (id < 0 || i >= words_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " has no word");
  }
  return words_[i];
}

int Vocabulary::size() const {
  return static_cast<int>(words_.size()) + special::kCount;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write vocabulary: " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("vocabulary not found: " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

Tokenizer::Tokenizer(Vocabulary vocab, int max_seq_len)
    : vocab_(std::move(vocab)), max_seq_len_(max_seq_len) {
  if (max_seq_len_ < 2) throw ConfigError("max_seq_len must be >= 2");
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids = {special::kCls};
  for (const auto& w : split_whitespace(lowercase(text))) {
    if (static_cast<int>(ids.size()) >= max_seq_len_) break;
    ids.push_back(vocab_.id(w));
  }
  return ids;
}

std::string Tokenizer::token_string(int id) const { return vocab_.word(id); }

std::vector<Example> generate_domain(const DomainSpec& spec, int n,
                                     std::uint64_t seed,
                                     const Tokenizer& tokenizer) {
  if (n < 0) throw ArgumentError("generate_domain: n must be >= 0");
  if (spec.spurious_strength < 0.5 || spec.spurious_strength > 1.0) {
    throw ConfigError("spurious_strength must lie in [0.5, 1]");
  }
  if (spec.min_length < 1 || spec.max_length < spec.min_length) {
    throw ConfigError("bad length range for domain " + spec.name);
  }
  std::vector<std::string> inv_pos, inv_neg, sp_pos, sp_neg;
  for (const auto& t : spec.invariant_tokens) {
    (t.direction > 0 ? inv_pos : inv_neg).push_back(t.word);
  }
  for (const auto& t : spec.spurious_tokens) {
    (t.direction > 0 ? sp_pos : sp_neg).push_back(t.word);
  }
  if (inv_pos.empty() || inv_neg.empty() || sp_pos.empty() || sp_neg.empty() ||
      spec.filler_tokens.empty()) {
    throw ConfigError("domain " + spec.name +
                      " needs invariant, spurious and filler words of both kinds");
  }

  std::mt19937_64 rng(seed);
  std::vector<int> labels(static_cast<std::size_t>(n));
  const int negatives = n / 2;
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i < negatives ? 0 : 1;
  std::shuffle(labels.begin(), labels.end(), rng);

  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng)];
  };
  std::uniform_int_distribution<int> length(spec.min_length, spec.max_length);
  std::bernoulli_distribution distractor(spec.noise_rate);
  std::bernoulli_distribution aligned(spec.spurious_strength);

  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const bool positive = y == 1;
    std::vector<std::string> planted;
    planted.push_back(pick(positive ? inv_pos : inv_neg));
    if (distractor(rng)) planted.push_back(pick(positive ? inv_neg : inv_pos));
    const bool agree = aligned(rng);
    planted.push_back(pick(positive == agree ? sp_pos : sp_neg));

    const int total = std::max(length(rng), static_cast<int>(planted.size()));
    std::vector<std::string> words;
    for (int k = 0; k < total - static_cast<int>(planted.size()); ++k) {
      words.push_back(pick(spec.filler_tokens));
    }
    for (const auto& w : planted) {
      std::uniform_int_distribution<std::size_t> at(0, words.size());
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(at(rng)), w);
    }
    Example e;
    e.id = spec.name + ":" + std::to_string(i);
    std::ostringstream text;
    for (std::size_t k = 0; k < words.size(); ++k) {
      if (k) text << ' ';
      text << words[k];
    }
    e.text = text.str();
    e.tokens = tokenizer.encode(e.text);
    e.label = y;
    e.domain = spec.name;
    out.push_back(std::move(e));
  }
  return out;
}

void validate_suite(std::span<const DomainSpec> specs) {
  std::map<std::string, std::string> owner;
  std::set<std::string> invariant;
  for (const auto& s : specs) {
    for (const auto& t : s.invariant_tokens) invariant.insert(t.word);
  }
  std::set<std::string> names;
  for (const auto& s : specs) {
    if (!names.insert(s.name).second) {
      throw ConfigError("duplicate domain name " + s.name);
    }
    for (const auto& t : s.spurious_tokens) {
      if (invariant.count(t.word)) {
        throw ConfigError("spurious word '" + t.word + "' of " + s.name +
                          " is also an invariant word");
      }
      auto [it, inserted] = owner.emplace(t.word, s.name);
      if (!inserted && it->second != s.name) {
        throw ConfigError("spurious word '" + t.word + "' shared by " +
                          it->second + " and " + s.name);
      }
    }
  }
}

std::vector<DomainSpec> default_suite(double rho) {
  const auto invariant = directed(
      {"good", "great", "excellent", "wonderful", "love", "best", "amazing",
       "enjoyed", "perfect", "recommend", "fantastic", "pleasant"},
      {"bad", "terrible", "awful", "poor", "hate", "worst", "boring",
       "disappointing", "waste", "horrible", "mediocre", "annoying"});
  const std::vector<std::string> shared_filler = {
      "the", "a", "and", "it", "was", "this", "i", "is", "of", "to",
      "with", "for", "on", "my", "that", "we", "they", "at"};
  auto fillers = [&](std::vector<std::string> topical) {
    std::vector<std::string> f = shared_filler;
    f.insert(f.end(), topical.begin(), topical.end());
    return f;
  };

  std::vector<DomainSpec> suite(4);
  suite[0].name = "movies";
  suite[0].spurious_tokens = directed({"oscar", "cinematography", "sequel"},
                                      {"remake", "runtime", "subtitles"});
  suite[0].filler_tokens = fillers({"film", "actor", "scene", "director",
                                    "story", "cast", "screen", "character",
                                    "ending", "dialogue", "script", "studio"});
  suite[0].min_length = 24;
  suite[0].max_length = 40;
  suite[0].noise_rate = 0.1;

  suite[1].name = "products";
  suite[1].spurious_tokens = directed({"warranty", "shipping", "battery"},
                                      {"refund", "packaging", "charger"});
  suite[1].filler_tokens = fillers({"product", "item", "price", "order",
                                    "device", "seller", "box", "size", "color",
                                    "model", "brand", "purchase"});
  suite[1].min_length = 12;
  suite[1].max_length = 24;
  suite[1].noise_rate = 0.1;

  suite[2].name = "hotels";
  suite[2].spurious_tokens = directed({"concierge", "balcony", "breakfast"},
                                      {"lobby", "checkout", "parking"});
  suite[2].filler_tokens = fillers({"room", "hotel", "staff", "stay", "bed",
                                    "night", "location", "pool", "view",
                                    "reception", "suite", "booking"});
  suite[2].min_length = 12;
  suite[2].max_length = 24;
  suite[2].noise_rate = 0.1;

  suite[3].name = "tweets";
  suite[3].spurious_tokens =
      directed({"@bestie", "#blessed", "lol"}, {"@boss", "#fml", "smh"});
  suite[3].filler_tokens = fillers({"today", "u", "rt", "gonna", "omg", "tbh",
                                    "2day", "ya", "im", "just", "now", "day"});
  suite[3].min_length = 4;
  suite[3].max_length = 9;
  suite[3].noise_rate = 0.35;

  for (auto& s : suite) {
    s.invariant_tokens = invariant;
    s.spurious_strength = rho;
  }
  return suite;
}

std::vector<std::string> suite_lexicon(std::span<const DomainSpec> specs) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  auto add = [&](const std::string& w) {
    if (seen.insert(lowercase(w)).second) out.push_back(lowercase(w));
  };
  for (const auto& s : specs) {
    for (const auto& t : s.invariant_tokens) add(t.word);
  }
  for (const auto& s : specs) {
    for (const auto& t : s.spurious_tokens) add(t.word);
    for (const auto& w : s.filler_tokens) add(w);
  }
  return out;
}

std::vector<Example> ingest_jsonl(const std::filesystem::path& path,
                                  const std::string& domain_name,
                                  const Tokenizer& tokenizer) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("corpus file not found: " + path.string());
  std::vector<Example> out;
  std::string line;
  int line_no = 0;
  int record = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no) +
                        ": malformed JSON line");
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string() ||
        !j.contains("label") || !j["label"].is_number_integer()) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no) +
                        ": record needs string 'text' and integer 'label'");
    }
    const int label = j["label"].get<int>();
    if (label != 0 && label != 1) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no) +
                        ": label " + std::to_string(label) + " not in {0,1}");
    }
    Example e;
    e.text = j["text"].get<std::string>();
    e.label = label;
    e.domain = domain_name;
    e.id = j.contains("id") && j["id"].is_string()
               ? j["id"].get<std::string>()
               : domain_name + ":" + std::to_string(record);
    e.tokens = tokenizer.encode(e.text);
    out.push_back(std::move(e));
    ++record;
  }
  return out;
}

std::string to_jsonl_line(const Example& e) {
  nlohmann::ordered_json j;
  j["text"] = e.text;
  j["label"] = e.label;
  j["domain"] = e.domain;
  j["id"] = e.id;
  return j.dump();
}

void write_jsonl(const std::filesystem::path& path,
                 std::span<const Example> examples) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : examples) out << to_jsonl_line(e) << '\n';
  if (!out) throw Error("short write on " + path.string());
}

DomainSplits make_splits(std::span<const Example> examples,
                         const SplitSpec& spec, std::uint64_t seed) {
  if (spec.train < 0 || spec.validation < 0 || spec.test < 0 ||
      spec.ads_heldout < 0) {
    throw ArgumentError("split sizes must be non-negative");
  }
  if (static_cast<int>(examples.size()) < spec.total()) {
    throw ArgumentError("make_splits: " + std::to_string(examples.size()) +
                        " examples, spec needs " + std::to_string(spec.total()));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < examples.size(); ++i) {
    by_label[examples[i].label == 1 ? 1 : 0].push_back(i);
  }
  std::shuffle(by_label[0].begin(), by_label[0].end(), rng);
  std::shuffle(by_label[1].begin(), by_label[1].end(), rng);
  std::size_t cursor[2] = {0, 0};
  // Odd-sized splits alternate which label gets the extra example.
  int extra_to = 1;
  auto take = [&](int k, std::vector<Example>& dst) {
    int want[2] = {k / 2, k / 2};
    if (k % 2) {
      want[extra_to] += 1;
      extra_to = 1 - extra_to;
    }
    for (int c = 0; c < 2; ++c) {
      if (cursor[c] + static_cast<std::size_t>(want[c]) > by_label[c].size()) {
        throw ArgumentError("make_splits: not enough label-" + std::to_string(c) +
                            " examples for a balanced split");
      }
    }
    std::vector<std::size_t> picked;
    for (int c = 0; c < 2; ++c) {
      for (int j = 0; j < want[c]; ++j) picked.push_back(by_label[c][cursor[c]++]);
    }
    std::shuffle(picked.begin(), picked.end(), rng);
    for (auto i : picked) dst.push_back(examples[i]);
  };

  DomainSplits out;
  take(spec.ads_heldout, out.ads);
  // Reshuffle the remainder before partitioning.
  for (int c = 0; c < 2; ++c) {
    std::shuffle(by_label[c].begin() + static_cast<std::ptrdiff_t>(cursor[c]),
                 by_label[c].end(), rng);
  }
  take(spec.train, out.train);
  take(spec.validation, out.validation);
  take(spec.test, out.test);
  return out;
}

SplitSpec scaled_split_spec(int divisor) {
  if (divisor <= 0) throw ArgumentError("divisor must be positive");
  return {10000 / divisor, 2000 / divisor, 3000 / divisor, 500 / divisor};
}

}  // namespace agm

namespace agm {

SyntheticSuite generate_suite(std::span<const DomainSpec> specs,
                              const SplitSpec& split, std::uint64_t seed,
                              int vocab_capacity, int max_seq_len) {
  validate_suite(specs);
  const auto lexicon = suite_lexicon(specs);
  SyntheticSuite suite{
      Tokenizer(Vocabulary::build(lexicon, {}, vocab_capacity), max_seq_len), {}};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::uint64_t base = seed * 1000003ULL + 7919ULL * (i + 1);
    const auto examples =
        generate_domain(specs[i], split.total(), base, suite.tokenizer);
    suite.domains.push_back(
        {specs[i].name, make_splits(examples, split, base + 1)});
  }
  return suite;
}

}  // namespace agm
