#include "mathmoe/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <json.hpp>

namespace mathmoe {

namespace {

const std::vector<std::string> kTrailingPunct = {
    ".", ",", "!", "?", ";", ":", "。", "！", "？", "；", "，", "："};

const std::vector<std::string> kSentenceFinal = {".", "!", "?", "。", "！", "？"};

bool is_sentence_final(const Token& t) {
  if (t.kind != TokenKind::Word) return false;
  return std::find(kSentenceFinal.begin(), kSentenceFinal.end(), t.surface) !=
         kSentenceFinal.end();
}

bool is_formula_operator(char c) {
  static const std::string ops = "+-*/=^_()<>[]{}|,.%!";
  return ops.find(c) != std::string::npos;
}

// Splits one $...$ group body into math symbol tokens: digit runs (with an
// optional decimal point) and letter runs stay whole, operator characters
// stand alone, whitespace separates.
void lex_formula_chunk(const std::string& body, std::vector<RawToken>& out) {
  std::size_t i = 0;
  while (i < body.size()) {
    const char c = body[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i + 1;
      bool dot = false;
      while (j < body.size() &&
             (std::isdigit(static_cast<unsigned char>(body[j])) ||
              (!dot && body[j] == '.' && j + 1 < body.size() &&
               std::isdigit(static_cast<unsigned char>(body[j + 1]))))) {
        if (body[j] == '.') dot = true;
        ++j;
      }
      out.push_back({body.substr(i, j - i), TokenKind::MathSymbol});
      i = j;
    } else if (is_formula_operator(c)) {
      out.push_back({std::string(1, c), TokenKind::MathSymbol});
      ++i;
    } else {
      // Identifier: ASCII letters or any multi-byte sequence (Greek etc).
      std::size_t j = i;
      while (j < body.size() && !std::isspace(static_cast<unsigned char>(body[j])) &&
             !is_formula_operator(body[j]) &&
             !std::isdigit(static_cast<unsigned char>(body[j])))
        ++j;
      out.push_back({body.substr(i, j - i), TokenKind::MathSymbol});
      i = j;
    }
  }
}

void lex_word_chunk(const std::string& chunk, std::vector<RawToken>& out) {
  // Peel trailing punctuation into separate word tokens.
  std::vector<std::string> tail;
  std::string core = chunk;
  bool changed = true;
  while (changed && !core.empty()) {
    changed = false;
    for (const auto& p : kTrailingPunct) {
      if (core.size() > p.size() && core.ends_with(p)) {
        tail.push_back(p);
        core.resize(core.size() - p.size());
        changed = true;
        break;
      }
    }
  }
  if (!core.empty()) out.push_back({core, TokenKind::Word});
  for (auto it = tail.rbegin(); it != tail.rend(); ++it)
    out.push_back({*it, TokenKind::Word});
}

}  // namespace

std::vector<RawToken> lex(const std::string& raw, std::vector<Span>* out_formulas) {
  std::vector<RawToken> tokens;
  std::size_t i = 0;
  while (i < raw.size()) {
    if (std::isspace(static_cast<unsigned char>(raw[i]))) {
      ++i;
      continue;
    }
    if (raw[i] == '$') {
      const std::size_t close = raw.find('$', i + 1);
      if (close == std::string::npos)
        throw ValidationError("unterminated formula delimiter '$'");
      const std::size_t start = tokens.size();
      lex_formula_chunk(raw.substr(i + 1, close - i - 1), tokens);
      if (out_formulas && tokens.size() > start)
        out_formulas->emplace_back(start, tokens.size());
      i = close + 1;
      continue;
    }
    std::size_t j = i;
    while (j < raw.size() && !std::isspace(static_cast<unsigned char>(raw[j])) &&
           raw[j] != '$')
      ++j;
    lex_word_chunk(raw.substr(i, j - i), tokens);
    i = j;
  }
  return tokens;
}

Vocabulary::Vocabulary() {
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"})
    add(s);
}

TokenId Vocabulary::add(const std::string& surface) {
  auto it = surface_to_id_.find(surface);
  if (it != surface_to_id_.end()) return it->second;
  const TokenId id = static_cast<TokenId>(id_to_surface_.size());
  surface_to_id_.emplace(surface, id);
  id_to_surface_.push_back(surface);
  return id;
}

std::optional<TokenId> Vocabulary::lookup(const std::string& surface) const {
  auto it = surface_to_id_.find(surface);
  if (it == surface_to_id_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(const std::string& surface) const {
  auto it = surface_to_id_.find(surface);
  return it == surface_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::surface(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_surface_.size())
    throw ValueError("vocabulary id out of range: " + std::to_string(id));
  return id_to_surface_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  nlohmann::ordered_json j;
  j["surfaces"] = id_to_surface_;
  std::ofstream out(path);
  if (!out) throw ValueError("cannot open " + path);
  out << j.dump() << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  Vocabulary v;
  const auto& surfaces = j.at("surfaces");
  for (std::size_t i = kNumSpecial; i < surfaces.size(); ++i)
    v.add(surfaces[i].get<std::string>());
  return v;
}

std::vector<std::int64_t> MathText::token_ids() const {
  std::vector<std::int64_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(t.id);
  return ids;
}

void MathText::validate(std::size_t vocab_size) const {
  const std::size_t n = tokens.size();
  if (statement_len > n) throw ValidationError("statement_len exceeds token count");
  for (const auto& t : tokens)
    if (t.id < 0 || static_cast<std::size_t>(t.id) >= vocab_size)
      throw ValidationError("token id out of vocabulary range");
  auto check_spans = [n](const std::vector<Span>& spans, const char* what) {
    std::size_t prev_end = 0;
    bool first = true;
    for (const auto& [b, e] : spans) {
      if (b >= e || e > n) throw ValidationError(std::string(what) + " span out of bounds");
      if (!first && b < prev_end)
        throw ValidationError(std::string(what) + " spans overlap");
      prev_end = e;
      first = false;
    }
  };
  check_spans(formula_spans, "formula");
  check_spans(sentence_spans, "sentence");
  for (const auto& [b, e] : formula_spans)
    for (std::size_t i = b; i < e; ++i)
      if (tokens[i].kind != TokenKind::MathSymbol)
        throw ValidationError("formula span contains a non-math token");
  if (!sentence_spans.empty()) {
    std::size_t cursor = statement_len;
    for (const auto& [b, e] : sentence_spans) {
      if (b != cursor) throw ValidationError("sentence spans do not partition the solution");
      cursor = e;
    }
    if (cursor != n) throw ValidationError("sentence spans do not cover the solution");
  }
}

namespace {

std::vector<Token> map_ids(std::vector<RawToken> raw, const Vocabulary& vocab) {
  std::vector<Token> out;
  out.reserve(raw.size());
  for (auto& r : raw)
    out.push_back({std::move(r.surface), r.kind, vocab.id_or_unk(r.surface)});
  return out;
}

}  // namespace

MathText tokenize(const std::string& raw, const Vocabulary& vocab) {
  if (raw.empty()) throw ValueError("tokenize: empty input text");
  MathText text;
  text.tokens = map_ids(lex(raw, &text.formula_spans), vocab);
  text.statement_len = text.tokens.size();
  return text;
}

MathText make_math_text(const std::string& statement, const std::string& solution,
                        const Vocabulary& vocab) {
  if (statement.empty()) throw ValueError("make_math_text: empty statement");
  MathText text;
  text.tokens = map_ids(lex(statement, &text.formula_spans), vocab);
  text.statement_len = text.tokens.size();
  if (!solution.empty()) {
    std::vector<Span> sol_formulas;
    auto sol = map_ids(lex(solution, &sol_formulas), vocab);
    for (auto& [b, e] : sol_formulas)
      text.formula_spans.emplace_back(b + text.statement_len, e + text.statement_len);
    text.tokens.insert(text.tokens.end(), std::make_move_iterator(sol.begin()),
                       std::make_move_iterator(sol.end()));
  }
  return segment_sentences(std::move(text));
}

MathText segment_sentences(MathText text) {
  text.sentence_spans.clear();
  const std::size_t n = text.tokens.size();
  std::size_t start = text.statement_len;
  for (std::size_t i = text.statement_len; i < n; ++i) {
    if (is_sentence_final(text.tokens[i])) {
      text.sentence_spans.emplace_back(start, i + 1);
      start = i + 1;
    }
  }
  if (start < n) text.sentence_spans.emplace_back(start, n);
  return text;
}

std::string detokenize_range(const MathText& text, std::size_t begin, std::size_t end) {
  std::string out;
  std::size_t fi = 0;
  for (std::size_t i = begin; i < end; ++i) {
    while (fi < text.formula_spans.size() && text.formula_spans[fi].second <= i) ++fi;
    const bool in_formula = fi < text.formula_spans.size() &&
                            i >= text.formula_spans[fi].first &&
                            i < text.formula_spans[fi].second;
    const bool opens = in_formula && i == text.formula_spans[fi].first;
    const bool closes = in_formula && i + 1 == text.formula_spans[fi].second;
    if (!out.empty()) out += ' ';
    if (opens && text.formula_spans[fi].first >= begin) out += "$ ";
    out += text.tokens[i].surface;
    if (closes && text.formula_spans[fi].second <= end) out += " $";
  }
  return out;
}

std::string detokenize(const MathText& text) {
  return detokenize_range(text, 0, text.tokens.size());
}

// ---------------------------------------------------------------------------
// corpus files
// ---------------------------------------------------------------------------

namespace {

CorpusRecord parse_record(const nlohmann::json& j, std::size_t line_no) {
  auto fail = [line_no](const std::string& what) {
    throw ParseError("line " + std::to_string(line_no) + ": " + what);
  };
  if (!j.is_object()) fail("expected a JSON object");
  if (!j.contains("statement") || !j["statement"].is_string())
    fail("missing string field 'statement'");
  if (!j.contains("solution") || !j["solution"].is_string())
    fail("missing string field 'solution'");
  CorpusRecord r;
  r.statement = j["statement"].get<std::string>();
  r.solution = j["solution"].get<std::string>();
  if (j.contains("labels")) {
    if (!j["labels"].is_array()) fail("'labels' must be an array of strings");
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) fail("'labels' must be an array of strings");
      r.labels.push_back(l.get<std::string>());
    }
  }
  if (j.contains("answer")) {
    if (!j["answer"].is_string()) fail("'answer' must be a string");
    r.answer = j["answer"].get<std::string>();
  }
  if (j.contains("task")) {
    if (!j["task"].is_string()) fail("'task' must be a string");
    r.task = j["task"].get<std::string>();
  }
  return r;
}

}  // namespace

std::vector<CorpusRecord> load_corpus_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open corpus file " + path);
  std::vector<CorpusRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ParseError("line " + std::to_string(line_no) + ": malformed JSON");
    records.push_back(parse_record(j, line_no));
  }
  return records;
}

void save_corpus(std::span<const CorpusRecord> records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValueError("cannot open " + path + " for writing");
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["statement"] = r.statement;
    j["solution"] = r.solution;
    if (!r.labels.empty()) j["labels"] = r.labels;
    if (r.answer) j["answer"] = *r.answer;
    if (r.task) j["task"] = *r.task;
    out << j.dump() << "\n";
  }
}

Vocabulary build_vocabulary(std::span<const CorpusRecord> records) {
  Vocabulary vocab;
  for (const auto& r : records) {
    for (const auto& t : lex(r.statement, nullptr)) vocab.add(t.surface);
    if (!r.solution.empty())
      for (const auto& t : lex(r.solution, nullptr)) vocab.add(t.surface);
  }
  return vocab;
}

std::vector<MathText> load_corpus(const std::string& path, const Vocabulary& vocab) {
  const auto records = load_corpus_records(path);
  std::vector<MathText> texts;
  texts.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      MathText t = make_math_text(records[i].statement, records[i].solution, vocab);
      t.validate(vocab.size());
      texts.push_back(std::move(t));
    } catch (const ValidationError& e) {
      throw ValidationError("record " + std::to_string(i + 1) + ": " + e.what());
    } catch (const ValueError& e) {
      throw ValidationError("record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return texts;
}

}  // namespace mathmoe
