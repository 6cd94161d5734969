#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mathmoe/rng.hpp"
#include "mathmoe/text.hpp"

namespace mathmoe {

/// Single-digit arithmetic problems with multi-sentence, multi-formula
/// solutions. Vocabulary stays under 128 surfaces. Deterministic per seed.
std::vector<CorpusRecord> make_arithmetic_corpus(std::size_t count, std::uint64_t seed);

struct RandomTextOptions {
  std::size_t min_sentences = 2;
  std::size_t max_sentences = 5;
  std::size_t min_words = 2;
  std::size_t max_words = 6;
  double formula_prob = 0.7;  // chance a sentence carries a formula
};

/// Random filler-word / formula records for property tests.
CorpusRecord random_corpus_record(Rng& rng, const RandomTextOptions& opts = {});

/// Classification task corpus: each statement plants exactly one keyword and
/// the record label is the keyword's class. Keywords and labels are given as
/// parallel vectors.
std::vector<CorpusRecord> make_classification_corpus(
    std::size_t count, std::uint64_t seed, const std::string& task_name,
    const std::vector<std::string>& keywords, const std::vector<std::string>& labels);

/// Copy task corpus: the solution repeats the statement tokens verbatim.
std::vector<CorpusRecord> make_copy_corpus(std::size_t count, std::uint64_t seed,
                                           std::size_t min_len, std::size_t max_len);

}  // namespace mathmoe
