#include "agm/data.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "agm/errors.hpp"
#include "agm/model.hpp"

namespace agm {
namespace {

Tokenizer suite_tokenizer(const std::vector<DomainSpec>& suite) {
  const auto lexicon = suite_lexicon(suite);
  return Tokenizer(Vocabulary::build(lexicon, {}, 1000), 64);
}

int spurious_direction(const Example& e, const DomainSpec& spec) {
  std::istringstream in(e.text);
  std::string w;
  while (in >> w) {
    for (const auto& t : spec.spurious_tokens) {
      if (t.word == w) return t.direction;
    }
  }
  return 0;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

TEST(DataTest, PerfectSpuriousStrengthPredictsLabel) {
  auto suite = default_suite(1.0);
  const auto tok = suite_tokenizer(suite);
  for (const auto& e : generate_domain(suite[1], 400, 3, tok)) {
    EXPECT_EQ(spurious_direction(e, suite[1]), e.label == 1 ? 1 : -1);
  }
}

TEST(DataTest, HalfStrengthDecorrelatesSpuriousTokens) {
  auto suite = default_suite(0.5);
  const auto tok = suite_tokenizer(suite);
  const auto ex = generate_domain(suite[0], 10000, 17, tok);
  // Pearson correlation of two +-1 variables.
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (const auto& e : ex) {
    const double x = spurious_direction(e, suite[0]);
    const double y = e.label == 1 ? 1.0 : -1.0;
    sx += x; sy += y; sxy += x * y; sxx += x * x; syy += y * y;
  }
  const double n = static_cast<double>(ex.size());
  const double r = (sxy / n - sx / n * sy / n) /
                   std::sqrt((sxx / n - sx * sx / n / n) * (syy / n - sy * sy / n / n));
  EXPECT_LT(std::abs(r), 0.05);
}

TEST(DataTest, GeneratedExamplesAreWellFormed) {
  auto suite = default_suite();
  const auto tok = suite_tokenizer(suite);
  EXPECT_TRUE(generate_domain(suite[2], 0, 1, tok).empty());
  const auto ex = generate_domain(suite[3], 501, 1, tok);
  int pos = 0;
  for (const auto& e : ex) {
    pos += e.label;
    EXPECT_EQ(e.tokens.front(), special::kCls);
    EXPECT_LE(e.tokens.size(), 64u);
    // At least one agreeing invariant word.
    bool agrees = false;
    std::istringstream in(e.text);
    std::string w;
    while (in >> w) {
      for (const auto& t : suite[3].invariant_tokens) {
        if (t.word == w && t.direction == (e.label ? 1 : -1)) agrees = true;
      }
      EXPECT_NE(tok.vocabulary().id(w), special::kUnk) << w;
    }
    EXPECT_TRUE(agrees) << e.text;
  }
  EXPECT_EQ(pos, 251);
}

TEST(DataTest, GenerationIsByteIdenticalPerSeed) {
  auto suite = default_suite();
  const auto tok = suite_tokenizer(suite);
  const auto a = generate_domain(suite[0], 50, 9, tok);
  const auto b = generate_domain(suite[0], 50, 9, tok);
  const auto pa = temp_file("agm_gen_a.jsonl");
  const auto pb = temp_file("agm_gen_b.jsonl");
  write_jsonl(pa, a);
  write_jsonl(pb, b);
  std::ifstream fa(pa), fb(pb);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_NE(to_jsonl_line(generate_domain(suite[0], 1, 10, tok)[0]),
            to_jsonl_line(a[0]));
}

TEST(DataTest, SpuriousSetsAreDisjointAcrossDefaultSuite) {
  const auto suite = default_suite();
  EXPECT_NO_THROW(validate_suite(suite));
  std::set<std::string> seen;
  for (const auto& s : suite) {
    for (const auto& t : s.spurious_tokens) EXPECT_TRUE(seen.insert(t.word).second);
  }
  auto broken = suite;
  broken[1].spurious_tokens.push_back(broken[0].spurious_tokens[0]);
  EXPECT_THROW(validate_suite(broken), ConfigError);
}

TEST(DataTest, IngestJsonl) {
  const Tokenizer tok(Vocabulary({"good", "bad"}), 64);
  const auto path = temp_file("agm_ingest.jsonl");
  {
    std::ofstream out(path);
    out << R"({"text":"good","label":1})" << '\n'
        << R"({"text":"Good zebra","label":0,"domain":"x"})" << '\n';
  }
  const auto ex = ingest_jsonl(path, "reviews", tok);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].tokens, (std::vector<int>{special::kCls, 4}));
  EXPECT_EQ(ex[1].tokens, (std::vector<int>{special::kCls, 4, special::kUnk}));
  EXPECT_EQ(ex[0].id, "reviews:0");
  EXPECT_EQ(ex[1].domain, "reviews");

  { std::ofstream out(path, std::ios::trunc); }
  EXPECT_TRUE(ingest_jsonl(path, "reviews", tok).empty());

  {
    std::ofstream out(path, std::ios::trunc);
    out << R"({"text":"good","label":1})" << '\n' << "{not json" << '\n';
  }
  try {
    ingest_jsonl(path, "reviews", tok);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  {
    std::ofstream out(path, std::ios::trunc);
    out << R"({"text":"good","label":2})" << '\n';
  }
  EXPECT_THROW(ingest_jsonl(path, "reviews", tok), SchemaError);
  std::filesystem::remove(path);
}

TEST(DataTest, TokenizerTruncatesAndLowercases) {
  const Tokenizer tok(Vocabulary({"good"}), 3);
  EXPECT_EQ(tok.encode("GOOD good good good"),
            (std::vector<int>{special::kCls, 4, 4}));
  EXPECT_EQ(tok.token_string(special::kMask), "[MASK]");
}

TEST(DataTest, VocabularyFileRoundTrip) {
  const auto path = temp_file("agm_vocab.txt");
  Vocabulary v = Vocabulary::build(std::vector<std::string>{"b", "a"},
                                   std::vector<std::string>{"c c d", "d c"}, 7);
  EXPECT_EQ(v.size(), 7);
  EXPECT_EQ(v.id("b"), 4);
  EXPECT_EQ(v.id("c"), 6);
  EXPECT_EQ(v.id("d"), special::kUnk);  // capacity reached
  v.save(path);
  const Vocabulary w = Vocabulary::load(path);
  EXPECT_EQ(w.words(), v.words());
  std::filesystem::remove(path);
}

TEST(DataTest, SplitsFollowScaledShapeAndStayDisjoint) {
  auto suite = default_suite();
  const auto tok = suite_tokenizer(suite);
  const SplitSpec spec = scaled_split_spec(10);
  EXPECT_EQ(spec.train, 1000);
  EXPECT_EQ(spec.validation, 200);
  EXPECT_EQ(spec.test, 300);
  EXPECT_EQ(spec.ads_heldout, 50);
  const auto ex = generate_domain(suite[0], spec.total(), 4, tok);
  const auto s = make_splits(ex, spec, 42);
  EXPECT_EQ(s.train.size(), 1000u);
  EXPECT_EQ(s.validation.size(), 200u);
  EXPECT_EQ(s.test.size(), 300u);
  EXPECT_EQ(s.ads.size(), 50u);
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.validation, &s.test, &s.ads}) {
    int pos = 0;
    for (const auto& e : *part) {
      EXPECT_TRUE(ids.insert(e.id).second) << e.id;
      pos += e.label;
    }
    EXPECT_LE(std::abs(2 * pos - static_cast<int>(part->size())), 1);
  }
  const auto again = make_splits(ex, spec, 42);
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    EXPECT_EQ(s.train[i].id, again.train[i].id);
  }
  EXPECT_THROW(make_splits(std::span(ex).first(100), spec, 42), ArgumentError);
}

}  // namespace
}  // namespace agm
