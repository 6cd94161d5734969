#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "mathmoe/synth.hpp"
#include "mathmoe/text.hpp"

using namespace mathmoe;

namespace {

std::string temp_path(const std::string& name) {
  return std::string("/tmp/mathmoe_text_") + name;
}

}  // namespace

TEST_CASE("tokenize splits words, formulas and punctuation") {
  Vocabulary vocab;
  for (const char* s : {"sum", "1", "+", "2", "."}) vocab.add(s);
  MathText t = tokenize("sum $1 + 2$ .", vocab);
  REQUIRE(t.size() == 5);
  CHECK(t.tokens[0].surface == "sum");
  CHECK(t.tokens[0].kind == TokenKind::Word);
  CHECK(t.tokens[1].kind == TokenKind::MathSymbol);
  CHECK(t.tokens[3].surface == "2");
  CHECK(t.tokens[4].surface == ".");
  REQUIRE(t.formula_spans.size() == 1);
  CHECK(t.formula_spans[0] == Span{1, 4});
}

TEST_CASE("tokenize errors and UNK mapping") {
  Vocabulary vocab;
  CHECK_THROWS_AS(tokenize("", vocab), ValueError);
  MathText t = tokenize("unknownword", vocab);
  CHECK(t.tokens[0].id == Vocabulary::kUnk);
  CHECK_THROWS_AS(tokenize("open $1 + 2", vocab), ValidationError);
}

TEST_CASE("tokenize is deterministic and unspaced formulas split") {
  Vocabulary vocab;
  MathText a = tokenize("eval $12+3*x$ now", vocab);
  MathText b = tokenize("eval $12+3*x$ now", vocab);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.tokens[i].surface == b.tokens[i].surface);
    CHECK(a.tokens[i].id == b.tokens[i].id);
  }
  // 12, +, 3, *, x
  REQUIRE(a.formula_spans.size() == 1);
  CHECK(a.formula_spans[0] == Span{1, 6});
  CHECK(a.tokens[1].surface == "12");
  CHECK(a.tokens[2].surface == "+");
  CHECK(a.tokens[4].surface == "*");
}

TEST_CASE("detokenize round trip up to canonical whitespace") {
  Rng rng(123);
  for (int i = 0; i < 50; ++i) {
    CorpusRecord r = random_corpus_record(rng);
    Vocabulary vocab = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText t = make_math_text(r.statement, r.solution, vocab);
    MathText again = make_math_text(detokenize_range(t, 0, t.statement_len),
                                    detokenize_range(t, t.statement_len, t.size()), vocab);
    REQUIRE(again.size() == t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
      CHECK(again.tokens[k].surface == t.tokens[k].surface);
      CHECK(again.tokens[k].kind == t.tokens[k].kind);
    }
    CHECK(again.formula_spans == t.formula_spans);
  }
  // Canonically spaced text reproduces exactly.
  Vocabulary vocab;
  const std::string canonical = "sum $ 1 + 2 $ .";
  CHECK(detokenize(tokenize(canonical, vocab)) == canonical);
}

TEST_CASE("formula spans contain only math symbols on random corpora") {
  Rng rng(99);
  for (int i = 0; i < 100; ++i) {
    CorpusRecord r = random_corpus_record(rng);
    Vocabulary vocab = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText t = make_math_text(r.statement, r.solution, vocab);
    t.validate(vocab.size());
    for (const auto& [b, e] : t.formula_spans)
      for (std::size_t k = b; k < e; ++k)
        CHECK(t.tokens[k].kind == TokenKind::MathSymbol);
  }
}

TEST_CASE("segment_sentences splits on punctuation") {
  Vocabulary vocab;
  MathText t = make_math_text("q", "a . b .", vocab);
  REQUIRE(t.sentence_spans.size() == 2);
  CHECK(t.sentence_spans[0] == Span{1, 3});
  CHECK(t.sentence_spans[1] == Span{3, 5});

  MathText u = make_math_text("q", "a b c", vocab);
  REQUIRE(u.sentence_spans.size() == 1);
  CHECK(u.sentence_spans[0] == Span{1, 4});
}

TEST_CASE("segment_sentences agrees with a regex oracle") {
  // Oracle: split the solution string on sentence-final punctuation.
  Rng rng(55);
  for (int i = 0; i < 40; ++i) {
    CorpusRecord r = random_corpus_record(rng);
    Vocabulary vocab = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText t = make_math_text(r.statement, r.solution, vocab);
    const std::regex sentence_re(R"([^.!?]*[.!?])");
    auto begin = std::sregex_iterator(r.solution.begin(), r.solution.end(), sentence_re);
    const std::size_t oracle_count =
        static_cast<std::size_t>(std::distance(begin, std::sregex_iterator()));
    CHECK(t.sentence_spans.size() == oracle_count);
    // Every solution token belongs to exactly one span.
    std::size_t covered = 0;
    for (const auto& [b, e] : t.sentence_spans) covered += e - b;
    CHECK(covered == t.size() - t.statement_len);
  }
}

TEST_CASE("corpus load/save round trip") {
  const std::string path = temp_path("roundtrip.jsonl");
  Rng rng(7);
  std::vector<CorpusRecord> records;
  for (int i = 0; i < 1000; ++i) records.push_back(random_corpus_record(rng));
  records[3].labels = {"geometry", "algebra"};
  records[4].answer = "42";
  records[5].task = "kpc";
  save_corpus(records, path);

  auto loaded = load_corpus_records(path);
  REQUIRE(loaded.size() == records.size());
  CHECK(loaded[3].labels == records[3].labels);
  CHECK(loaded[4].answer == records[4].answer);
  CHECK(loaded[5].task == records[5].task);

  const std::string path2 = temp_path("roundtrip2.jsonl");
  save_corpus(loaded, path2);
  std::ifstream f1(path), f2(path2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(!s1.str().empty());
}

TEST_CASE("load_corpus yields validated texts and reports bad lines") {
  const std::string path = temp_path("valid.jsonl");
  {
    std::ofstream out(path);
    out << R"({"statement": "compute $ 1 + 2 $ .", "solution": "it is $ 3 $ ."})" << "\n";
    out << R"({"statement": "find x .", "solution": "x is $ 4 $ ."})" << "\n";
    out << R"({"statement": "third line", "solution": ""})" << "\n";
  }
  auto records = load_corpus_records(path);
  Vocabulary vocab = build_vocabulary(records);
  auto texts = load_corpus(path, vocab);
  CHECK(texts.size() == 3);

  const std::string bad = temp_path("bad.jsonl");
  {
    std::ofstream out(bad);
    out << R"({"statement": "ok", "solution": "fine ."})" << "\n";
    out << R"({"statement": "oops)" << "\n";
  }
  try {
    load_corpus_records(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  const std::string invalid = temp_path("invalid.jsonl");
  {
    std::ofstream out(invalid);
    out << R"({"statement": "ok", "solution": "fine ."})" << "\n";
    out << R"({"statement": "unbalanced $ 1 + 2", "solution": ""})" << "\n";
  }
  try {
    load_corpus(invalid, vocab);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("record 2") != std::string::npos);
  }
}

TEST_CASE("MathText validation rejects overlapping and mixed spans") {
  Vocabulary vocab;
  MathText t = make_math_text("q w", "a b .", vocab);
  t.validate(vocab.size());

  MathText bad = t;
  bad.formula_spans = {{0, 2}, {1, 3}};
  CHECK_THROWS_AS(bad.validate(vocab.size()), ValidationError);

  MathText mixed = t;
  mixed.formula_spans = {{0, 1}};  // "q" is a Word
  CHECK_THROWS_AS(mixed.validate(vocab.size()), ValidationError);
}

TEST_CASE("vocabulary save/load keeps ids stable") {
  Rng rng(31);
  auto records = make_arithmetic_corpus(50, 11);
  Vocabulary vocab = build_vocabulary(records);
  const std::string path = temp_path("vocab.json");
  vocab.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  CHECK(loaded.size() == vocab.size());
  for (TokenId id = 0; id < static_cast<TokenId>(vocab.size()); ++id)
    CHECK(loaded.surface(id) == vocab.surface(id));
  CHECK(vocab.is_special(Vocabulary::kMask));
  CHECK(!vocab.is_special(Vocabulary::kNumSpecial));
}

TEST_CASE("arithmetic corpus stays within a small vocabulary") {
  auto records = make_arithmetic_corpus(2000, 3);
  Vocabulary vocab = build_vocabulary(records);
  CHECK(vocab.size() <= 128);
  // And every record has at least two sentences and two formulas.
  for (int i = 0; i < 20; ++i) {
    MathText t = make_math_text(records[static_cast<std::size_t>(i)].statement,
                                records[static_cast<std::size_t>(i)].solution, vocab);
    CHECK(t.sentence_spans.size() >= 2);
    std::size_t sol_formulas = 0;
    for (const auto& [b, e] : t.formula_spans)
      if (b >= t.statement_len) ++sol_formulas;
    CHECK(sol_formulas >= 2);
  }
}
