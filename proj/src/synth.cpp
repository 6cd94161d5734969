#include "mathmoe/synth.hpp"

namespace mathmoe {

namespace {

const std::vector<std::string> kFillerWords = {
    "let",  "given", "find", "the",  "value", "of",   "number", "term",
    "sum",  "then",  "we",   "take", "so",    "next", "hence",  "now",
    "note", "that",  "each", "step", "gives", "with", "total",  "part"};

const std::vector<std::string> kSymbols = {"0", "1", "2", "3", "4", "5", "6",
                                           "7", "8", "9", "x", "y", "a", "b",
                                           "+", "-", "*", "="};

std::string pick(Rng& rng, const std::vector<std::string>& pool) {
  return pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))];
}

std::string random_formula(Rng& rng, std::size_t min_len, std::size_t max_len) {
  const std::size_t len =
      min_len + static_cast<std::size_t>(rng.uniform_int(max_len - min_len + 1));
  std::string f = "$";
  for (std::size_t i = 0; i < len; ++i) f += " " + pick(rng, kSymbols);
  return f + " $";
}

}  // namespace

std::vector<CorpusRecord> make_arithmetic_corpus(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CorpusRecord> records;
  records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    int a = static_cast<int>(rng.uniform_int(10));
    int b = static_cast<int>(rng.uniform_int(10));
    const int op = static_cast<int>(rng.uniform_int(3));
    char op_ch = "+-*"[op];
    if (op == 1 && a < b) std::swap(a, b);
    const int c = op == 0 ? a + b : op == 1 ? a - b : a * b;
    CorpusRecord r;
    r.statement = "compute $ " + std::to_string(a) + " " + op_ch + " " +
                  std::to_string(b) + " $ .";
    r.solution = "first we take $ " + std::to_string(a) + " $ . then we take $ " +
                 std::to_string(b) + " $ . so $ " + std::to_string(a) + " " + op_ch +
                 " " + std::to_string(b) + " = " + std::to_string(c) +
                 " $ . ANSWER $ " + std::to_string(c) + " $ .";
    r.answer = std::to_string(c);
    records.push_back(std::move(r));
  }
  return records;
}

CorpusRecord random_corpus_record(Rng& rng, const RandomTextOptions& opts) {
  auto sentence = [&](bool with_formula) {
    const std::size_t words =
        opts.min_words +
        static_cast<std::size_t>(rng.uniform_int(opts.max_words - opts.min_words + 1));
    std::string s;
    for (std::size_t i = 0; i < words; ++i) {
      if (!s.empty()) s += ' ';
      s += pick(rng, kFillerWords);
    }
    if (with_formula) s += " " + random_formula(rng, 2, 5);
    return s + " .";
  };
  CorpusRecord r;
  r.statement = sentence(rng.uniform() < opts.formula_prob);
  const std::size_t sentences =
      opts.min_sentences +
      static_cast<std::size_t>(rng.uniform_int(opts.max_sentences - opts.min_sentences + 1));
  for (std::size_t i = 0; i < sentences; ++i) {
    if (i) r.solution += ' ';
    r.solution += sentence(rng.uniform() < opts.formula_prob);
  }
  return r;
}

std::vector<CorpusRecord> make_classification_corpus(
    std::size_t count, std::uint64_t seed, const std::string& task_name,
    const std::vector<std::string>& keywords, const std::vector<std::string>& labels) {
  if (keywords.size() != labels.size() || keywords.empty())
    throw ValueError("make_classification_corpus: keywords/labels mismatch");
  Rng rng(seed);
  std::vector<CorpusRecord> records;
  records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = static_cast<std::size_t>(rng.uniform_int(keywords.size()));
    const std::size_t lead = 1 + static_cast<std::size_t>(rng.uniform_int(3));
    std::string stmt;
    for (std::size_t w = 0; w < lead; ++w) stmt += pick(rng, kFillerWords) + " ";
    stmt += keywords[cls];
    const std::size_t tail = 1 + static_cast<std::size_t>(rng.uniform_int(3));
    for (std::size_t w = 0; w < tail; ++w) stmt += " " + pick(rng, kFillerWords);
    stmt += " .";
    CorpusRecord r;
    r.statement = stmt;
    r.labels = {labels[cls]};
    r.task = task_name;
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<CorpusRecord> make_copy_corpus(std::size_t count, std::uint64_t seed,
                                           std::size_t min_len, std::size_t max_len) {
  Rng rng(seed);
  std::vector<CorpusRecord> records;
  records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len =
        min_len + static_cast<std::size_t>(rng.uniform_int(max_len - min_len + 1));
    std::string s;
    for (std::size_t w = 0; w < len; ++w) {
      if (!s.empty()) s += ' ';
      s += pick(rng, kFillerWords);
    }
    CorpusRecord r;
    r.statement = s;
    r.solution = s;
    r.task = "copy";
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace mathmoe
