#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>

#include "mathmoe/corruption.hpp"
#include "mathmoe/synth.hpp"

using namespace mathmoe;

namespace {

std::multiset<std::string> surface_multiset(const MathText& t, std::size_t begin = 0) {
  std::multiset<std::string> ms;
  for (std::size_t i = begin; i < t.size(); ++i) ms.insert(t.tokens[i].surface);
  return ms;
}

MathText two_token_text(const Vocabulary& vocab) {
  return tokenize("alpha beta", vocab);
}

}  // namespace

TEST_CASE("sample_mask_positions linear weighting on two tokens") {
  Vocabulary vocab;
  vocab.add("alpha");
  vocab.add("beta");
  MathText t = two_token_text(vocab);
  // Weights are 1 and 2, so position 1 is picked with probability 2/3.
  std::size_t pos1 = 0;
  const int trials = 100000;
  for (int s = 0; s < trials; ++s) {
    auto picked = sample_mask_positions(t, 0.5, static_cast<std::uint64_t>(s));
    REQUIRE(picked.size() == 1);
    if (picked[0] == 1) ++pos1;
  }
  const double frac = static_cast<double>(pos1) / trials;
  CHECK(frac == doctest::Approx(2.0 / 3.0).epsilon(0.015));
}

TEST_CASE("sample_mask_positions exhaustion and determinism") {
  Vocabulary vocab;
  MathText t = tokenize("a b c d e", vocab);
  auto all = sample_mask_positions(t, 0.99, 7);
  CHECK(all.size() == 5);

  auto p1 = sample_mask_positions(t, 0.4, 123);
  auto p2 = sample_mask_positions(t, 0.4, 123);
  CHECK(p1 == p2);

  CHECK_THROWS_AS(sample_mask_positions(t, 0.0, 1), ValueError);
  CHECK_THROWS_AS(sample_mask_positions(tokenize("only", vocab), 0.5, 1), ValueError);
}

TEST_CASE("sample_mask_positions never selects special tokens") {
  Vocabulary vocab;
  MathText t = tokenize("a b c", vocab);
  t.tokens.push_back({"[SEP]", TokenKind::Special, Vocabulary::kSep});
  for (int s = 0; s < 200; ++s)
    for (auto p : sample_mask_positions(t, 0.9, static_cast<std::uint64_t>(s)))
      CHECK(t.tokens[p].kind != TokenKind::Special);
}

TEST_CASE("mean selected index exceeds the midpoint under linear weights") {
  Vocabulary vocab;
  std::string raw;
  for (int i = 0; i < 100; ++i) raw += (i ? " w" : "w") + std::to_string(i);
  MathText t = tokenize(raw, vocab);
  double total = 0.0;
  std::size_t count = 0;
  for (int s = 0; s < 10000; ++s) {
    auto picked = sample_mask_positions(t, 0.15, static_cast<std::uint64_t>(s));
    for (auto p : picked) total += static_cast<double>(p);
    count += picked.size();
  }
  CHECK(total / static_cast<double>(count) > 49.5);
}

TEST_CASE("apply_mlm_corruption action split and determinism") {
  auto records = make_arithmetic_corpus(1, 5);
  Vocabulary vocab = build_vocabulary(records);
  MathText t = make_math_text(records[0].statement, records[0].solution, vocab);

  auto a = apply_mlm_corruption(t, sample_mask_positions(t, 0.15, 9), vocab, 9);
  auto b = apply_mlm_corruption(t, sample_mask_positions(t, 0.15, 9), vocab, 9);
  REQUIRE(a.corrupted.size() == b.corrupted.size());
  for (std::size_t i = 0; i < a.corrupted.size(); ++i)
    CHECK(a.corrupted.tokens[i].id == b.corrupted.tokens[i].id);

  // Empty positions leave the text untouched.
  auto empty = apply_mlm_corruption(t, {}, vocab, 3);
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(empty.corrupted.tokens[i].id == t.tokens[i].id);

  // Action frequencies over many positions.
  std::map<MaskAction, std::size_t> freq;
  std::size_t total = 0;
  Rng rng(17);
  for (int s = 0; s < 4000; ++s) {
    CorpusRecord r = random_corpus_record(rng);
    Vocabulary v = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText text = make_math_text(r.statement, r.solution, v);
    auto rec = apply_mlm_corruption(
        text, sample_mask_positions(text, 0.3, static_cast<std::uint64_t>(s)), v,
        static_cast<std::uint64_t>(s));
    for (auto act : rec.actions) ++freq[act];
    total += rec.actions.size();
    // Masked positions recorded are exactly the requested ones.
    CHECK(rec.masked_positions.size() == rec.actions.size());
  }
  CHECK(total > 30000);
  CHECK(static_cast<double>(freq[MaskAction::Mask]) / total ==
        doctest::Approx(0.8).epsilon(0.025));
  CHECK(static_cast<double>(freq[MaskAction::Random]) / total ==
        doctest::Approx(0.1).epsilon(0.2));
  CHECK(static_cast<double>(freq[MaskAction::Keep]) / total ==
        doctest::Approx(0.1).epsilon(0.2));
}

TEST_CASE("shuffle_sentences basic cases") {
  Vocabulary vocab;
  MathText two = make_math_text("q", "a x . b y .", vocab);
  auto rec = shuffle_sentences(two, 11);
  REQUIRE(rec.has_value());
  // Only non-identity permutation of two spans is the swap.
  CHECK(rec->permutation == std::vector<std::size_t>{1, 0});
  CHECK(detokenize_range(rec->corrupted, rec->corrupted.statement_len,
                         rec->corrupted.size()) == "b y . a x .");
  // Statement untouched.
  CHECK(rec->corrupted.tokens[0].surface == "q");

  MathText three = make_math_text("q", "a . b . c .", vocab);
  auto r1 = shuffle_sentences(three, 21);
  auto r2 = shuffle_sentences(three, 21);
  REQUIRE(r1.has_value());
  CHECK(r1->permutation == r2->permutation);

  MathText one = make_math_text("q", "only one sentence .", vocab);
  CHECK(!shuffle_sentences(one, 1).has_value());
}

TEST_CASE("shuffle_sentences preserves token multiset on random corpora") {
  Rng rng(77);
  for (int i = 0; i < 300; ++i) {
    CorpusRecord r = random_corpus_record(rng);
    Vocabulary v = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText t = make_math_text(r.statement, r.solution, v);
    auto rec = shuffle_sentences(t, static_cast<std::uint64_t>(i));
    if (!rec) continue;
    CHECK(surface_multiset(rec->corrupted) == surface_multiset(t));
    CHECK(rec->corrupted.size() == t.size());
    rec->corrupted.validate(v.size());
  }
}

TEST_CASE("shuffle_formulas swaps contents and preserves non-formula text") {
  Vocabulary vocab;
  MathText t = make_math_text("q", "use $ 1 + 2 $ then $ 9 $ done .", vocab);
  auto rec = shuffle_formulas(t, 2);
  REQUIRE(rec.has_value());
  CHECK(rec->permutation == std::vector<std::size_t>{1, 0});
  CHECK(detokenize_range(rec->corrupted, rec->corrupted.statement_len,
                         rec->corrupted.size()) == "use $ 9 $ then $ 1 + 2 $ done .");
  CHECK(rec->corrupted.size() == t.size());

  MathText single = make_math_text("q", "only $ 1 $ here .", vocab);
  CHECK(!shuffle_formulas(single, 3).has_value());

  // Statement formulas are not part of the shuffled slots.
  MathText stmt_only = make_math_text("see $ 7 $ and $ 8 $", "no formulas here .", vocab);
  CHECK(!shuffle_formulas(stmt_only, 4).has_value());
}

TEST_CASE("shuffle_formulas preserves formula multiset on random corpora") {
  Rng rng(88);
  int shuffled = 0;
  for (int i = 0; i < 300; ++i) {
    CorpusRecord r = random_corpus_record(rng);
    Vocabulary v = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText t = make_math_text(r.statement, r.solution, v);
    auto rec = shuffle_formulas(t, static_cast<std::uint64_t>(i));
    if (!rec) continue;
    ++shuffled;
    CHECK(surface_multiset(rec->corrupted) == surface_multiset(t));
    // Concatenated formula content multiset is preserved as well.
    auto formula_ms = [](const MathText& m) {
      std::multiset<std::string> ms;
      for (const auto& [b, e] : m.formula_spans)
        for (std::size_t k = b; k < e; ++k) ms.insert(m.tokens[k].surface);
      return ms;
    };
    CHECK(formula_ms(rec->corrupted) == formula_ms(t));
    rec->corrupted.validate(v.size());
  }
  CHECK(shuffled > 50);
}

TEST_CASE("corruptions are pure functions of text and seed") {
  auto records = make_arithmetic_corpus(5, 123);
  Vocabulary vocab = build_vocabulary(records);
  for (const auto& r : records) {
    MathText t = make_math_text(r.statement, r.solution, vocab);
    for (std::uint64_t seed : {1ULL, 42ULL, 999ULL}) {
      auto m1 = apply_mlm_corruption(t, sample_mask_positions(t, 0.15, seed), vocab, seed);
      auto m2 = apply_mlm_corruption(t, sample_mask_positions(t, 0.15, seed), vocab, seed);
      CHECK(m1.masked_positions == m2.masked_positions);
      auto s1 = shuffle_sentences(t, seed);
      auto s2 = shuffle_sentences(t, seed);
      CHECK(s1->permutation == s2->permutation);
      auto f1 = shuffle_formulas(t, seed);
      auto f2 = shuffle_formulas(t, seed);
      CHECK(f1->permutation == f2->permutation);
    }
  }
}

TEST_CASE("masked fraction tracks the rate on long texts") {
  Rng rng(5);
  RandomTextOptions opts;
  opts.min_sentences = 8;
  opts.max_sentences = 14;
  opts.min_words = 4;
  opts.max_words = 9;
  std::size_t masked = 0, total = 0;
  for (int i = 0; i < 2000; ++i) {
    CorpusRecord r = random_corpus_record(rng, opts);
    Vocabulary v = build_vocabulary(std::vector<CorpusRecord>{r});
    MathText t = make_math_text(r.statement, r.solution, v);
    masked += sample_mask_positions(t, 0.15, static_cast<std::uint64_t>(i)).size();
    total += t.size();
  }
  const double frac = static_cast<double>(masked) / static_cast<double>(total);
  CHECK(frac == doctest::Approx(0.15).epsilon(1.0 / 15.0));  // 15% +- 1%
}
