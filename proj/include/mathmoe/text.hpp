#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mathmoe/errors.hpp"

namespace mathmoe {

enum class TokenKind { Word, MathSymbol, Special };

using TokenId = std::int32_t;

struct Token {
  std::string surface;
  TokenKind kind = TokenKind::Word;
  TokenId id = 0;
};

/// Half-open [first, second) token index range.
using Span = std::pair<std::size_t, std::size_t>;

/// Bijective surface <-> id mapping with the special tokens preloaded at
/// fixed ids. Ids are assigned in first-seen order, which makes vocabulary
/// construction deterministic for a given corpus ordering.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kMask = 4;
  static constexpr TokenId kBos = 5;
  static constexpr TokenId kEos = 6;
  static constexpr TokenId kNumSpecial = 7;

  Vocabulary();

  TokenId add(const std::string& surface);
  std::optional<TokenId> lookup(const std::string& surface) const;
  TokenId id_or_unk(const std::string& surface) const;
  const std::string& surface(TokenId id) const;
  std::size_t size() const { return id_to_surface_.size(); }
  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecial; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::unordered_map<std::string, TokenId> surface_to_id_;
  std::vector<std::string> id_to_surface_;
};

/// Tokenized mathematical text: a problem statement followed by a solution,
/// with formula and sentence segmentation. Instances are treated as values
/// and never mutated after construction.
struct MathText {
  std::vector<Token> tokens;
  std::vector<Span> formula_spans;
  std::vector<Span> sentence_spans;  // cover the solution region once segmented
  std::size_t statement_len = 0;

  std::size_t size() const { return tokens.size(); }
  std::vector<std::int64_t> token_ids() const;

  /// Throws ValidationError on any invariant breach.
  void validate(std::size_t vocab_size) const;
};

/// Lexer output before vocabulary mapping.
struct RawToken {
  std::string surface;
  TokenKind kind;
};

/// Deterministic whitespace-and-delimiter lexer. `$...$` groups are emitted
/// as MathSymbol tokens (delimiters dropped) and reported as formula char
/// ranges via out_formulas (token index ranges). Unterminated `$` throws.
std::vector<RawToken> lex(const std::string& raw, std::vector<Span>* out_formulas);

/// Tokenizes a statement-only text. Throws ValueError on empty input.
MathText tokenize(const std::string& raw, const Vocabulary& vocab);

/// Tokenizes statement + solution; statement_len marks the boundary and
/// sentence spans are segmented over the solution region.
MathText make_math_text(const std::string& statement, const std::string& solution,
                        const Vocabulary& vocab);

/// Returns a copy with sentence_spans recomputed: the solution region is
/// split after each sentence-final punctuation word; a trailing fragment
/// forms its own span; no punctuation yields a single covering span.
MathText segment_sentences(MathText text);

/// Canonical surface form: tokens joined by single spaces, formulas wrapped
/// in `$ ... $`. tokenize(detokenize(t)) reproduces t.
std::string detokenize(const MathText& text);
std::string detokenize_range(const MathText& text, std::size_t begin, std::size_t end);

// ---------------------------------------------------------------------------
// corpus files (JSON lines)
// ---------------------------------------------------------------------------

struct CorpusRecord {
  std::string statement;
  std::string solution;
  std::vector<std::string> labels;       // empty means absent
  std::optional<std::string> answer;
  std::optional<std::string> task;
};

/// One record per line: {"statement": ..., "solution": ..., "labels"?: [...],
/// "answer"?: ..., "task"?: ...}. Parse errors carry 1-based line numbers.
std::vector<CorpusRecord> load_corpus_records(const std::string& path);
void save_corpus(std::span<const CorpusRecord> records, const std::string& path);

/// Builds a vocabulary over every surface appearing in the records.
Vocabulary build_vocabulary(std::span<const CorpusRecord> records);

/// Loads, tokenizes, segments and validates every record. Validation errors
/// name the offending line.
std::vector<MathText> load_corpus(const std::string& path, const Vocabulary& vocab);

}  // namespace mathmoe
