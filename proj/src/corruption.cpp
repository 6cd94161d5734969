#include "mathmoe/corruption.hpp"

#include <algorithm>
#include <cmath>

namespace mathmoe {

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::MLM: return "MLM";
    case Objective::DAE: return "DAE";
    case Objective::SSR: return "SSR";
    case Objective::SFR: return "SFR";
    case Objective::USC: return "USC";
    case Objective::GSC: return "GSC";
  }
  return "?";
}

std::vector<std::size_t> sample_mask_positions(const MathText& text, double rate,
                                               std::uint64_t seed, bool solution_only) {
  if (rate <= 0.0 || rate >= 1.0) throw ValueError("mask rate must be in (0,1)");
  if (text.size() < 2) throw ValueError("text too short to mask");
  const std::size_t begin = solution_only ? text.statement_len : 0;
  const std::size_t end = text.size();
  std::vector<std::size_t> candidates;
  std::vector<double> weights;
  for (std::size_t i = begin; i < end; ++i) {
    if (text.tokens[i].kind == TokenKind::Special) continue;
    candidates.push_back(i);
    weights.push_back(static_cast<double>(i) + 1.0);  // linearly increasing
  }
  if (candidates.empty()) throw ValueError("no maskable positions");
  const std::size_t region = end - begin;
  std::size_t want = static_cast<std::size_t>(
      std::ceil(rate * static_cast<double>(region)));
  want = std::min(want, candidates.size());

  Rng rng(seed);
  std::vector<std::size_t> picked;
  picked.reserve(want);
  double total = 0.0;
  for (double w : weights) total += w;
  for (std::size_t k = 0; k < want; ++k) {
    double r = rng.uniform() * total;
    std::size_t idx = 0;
    for (; idx < candidates.size(); ++idx) {
      if (weights[idx] <= 0.0) continue;
      if (r < weights[idx]) break;
      r -= weights[idx];
    }
    if (idx >= candidates.size()) {  // float edge: take the last live candidate
      idx = candidates.size();
      while (idx > 0 && weights[idx - 1] <= 0.0) --idx;
      --idx;
    }
    picked.push_back(candidates[idx]);
    total -= weights[idx];
    weights[idx] = 0.0;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

CorruptionRecord apply_mlm_corruption(const MathText& text,
                                      std::span<const std::size_t> positions,
                                      const Vocabulary& vocab, std::uint64_t seed) {
  CorruptionRecord rec;
  rec.original = text;
  rec.corrupted = text;
  rec.objective = Objective::MLM;
  rec.rng_seed = seed;
  rec.masked_positions.assign(positions.begin(), positions.end());
  std::sort(rec.masked_positions.begin(), rec.masked_positions.end());

  const std::size_t vocab_tail = vocab.size() - Vocabulary::kNumSpecial;
  Rng rng(seed);
  for (std::size_t pos : rec.masked_positions) {
    if (pos >= text.size()) throw ValueError("mask position out of range");
    const double u = rng.uniform();
    MaskAction action;
    if (u < 0.8) {
      action = MaskAction::Mask;
      rec.corrupted.tokens[pos] = {"[MASK]", TokenKind::Special, Vocabulary::kMask};
    } else if (u < 0.9) {
      action = MaskAction::Random;
      if (vocab_tail == 0) throw ValueError("vocabulary has no non-special tokens");
      const TokenId id = Vocabulary::kNumSpecial +
                         static_cast<TokenId>(rng.uniform_int(vocab_tail));
      rec.corrupted.tokens[pos].surface = vocab.surface(id);
      rec.corrupted.tokens[pos].id = id;
    } else {
      action = MaskAction::Keep;
    }
    rec.actions.push_back(action);
  }
  return rec;
}

namespace {

// Non-identity permutation of [0, n); up to 16 redraws, identity flagged.
std::pair<std::vector<std::size_t>, bool> draw_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (int attempt = 0; attempt < 16; ++attempt) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t i = 0; i < n; ++i)
      if (perm[i] != i) return {perm, false};
  }
  return {perm, true};
}

}  // namespace

std::optional<CorruptionRecord> shuffle_sentences(const MathText& text,
                                                  std::uint64_t seed) {
  const auto& spans = text.sentence_spans;
  if (spans.size() < 2) return std::nullopt;

  Rng rng(seed);
  auto [perm, identity] = draw_permutation(spans.size(), rng);

  CorruptionRecord rec;
  rec.original = text;
  rec.objective = Objective::SSR;
  rec.rng_seed = seed;
  rec.permutation = perm;
  rec.identity_permutation = identity;

  MathText out;
  out.statement_len = text.statement_len;
  out.tokens.assign(text.tokens.begin(),
                    text.tokens.begin() + static_cast<std::ptrdiff_t>(text.statement_len));
  for (const auto& [b, e] : text.formula_spans)
    if (e <= text.statement_len) out.formula_spans.emplace_back(b, e);
  for (std::size_t slot = 0; slot < perm.size(); ++slot) {
    const auto [b, e] = spans[perm[slot]];
    const std::size_t offset = out.tokens.size();
    // Formulas never straddle sentence boundaries, so remap them wholesale.
    for (const auto& [fb, fe] : text.formula_spans)
      if (fb >= b && fe <= e)
        out.formula_spans.emplace_back(fb - b + offset, fe - b + offset);
    out.tokens.insert(out.tokens.end(),
                      text.tokens.begin() + static_cast<std::ptrdiff_t>(b),
                      text.tokens.begin() + static_cast<std::ptrdiff_t>(e));
  }
  std::sort(out.formula_spans.begin(), out.formula_spans.end());
  rec.corrupted = segment_sentences(std::move(out));
  return rec;
}

std::optional<CorruptionRecord> shuffle_formulas(const MathText& text,
                                                 std::uint64_t seed) {
  std::vector<Span> slots;
  for (const auto& [b, e] : text.formula_spans)
    if (b >= text.statement_len) slots.emplace_back(b, e);
  if (slots.size() < 2) return std::nullopt;

  Rng rng(seed);
  auto [perm, identity] = draw_permutation(slots.size(), rng);

  CorruptionRecord rec;
  rec.original = text;
  rec.objective = Objective::SFR;
  rec.rng_seed = seed;
  rec.permutation = perm;
  rec.identity_permutation = identity;

  MathText out;
  out.statement_len = text.statement_len;
  for (const auto& [b, e] : text.formula_spans)
    if (e <= text.statement_len) out.formula_spans.emplace_back(b, e);
  out.tokens.assign(text.tokens.begin(),
                    text.tokens.begin() + static_cast<std::ptrdiff_t>(text.statement_len));
  std::size_t next_slot = 0;
  std::size_t i = text.statement_len;
  while (i < text.size()) {
    if (next_slot < slots.size() && i == slots[next_slot].first) {
      const auto [sb, se] = slots[perm[next_slot]];
      const std::size_t offset = out.tokens.size();
      out.tokens.insert(out.tokens.end(),
                        text.tokens.begin() + static_cast<std::ptrdiff_t>(sb),
                        text.tokens.begin() + static_cast<std::ptrdiff_t>(se));
      out.formula_spans.emplace_back(offset, offset + (se - sb));
      i = slots[next_slot].second;
      ++next_slot;
    } else {
      out.tokens.push_back(text.tokens[i]);
      ++i;
    }
  }
  rec.corrupted = segment_sentences(std::move(out));
  return rec;
}

}  // namespace mathmoe
