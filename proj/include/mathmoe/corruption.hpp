#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mathmoe/rng.hpp"
#include "mathmoe/text.hpp"

namespace mathmoe {

struct Model;

enum class Objective { MLM, DAE, SSR, SFR, USC, GSC };
const char* objective_name(Objective o);

enum class MaskAction { Mask, Random, Keep };

/// One corruption of one text, pure function of (text, seed).
/// For MLM/DAE/USC/GSC the corrupted text has the original's length; for
/// SSR/SFR it has the original's token multiset. Corrupted texts are model
/// inputs only and are not required to satisfy corpus-level span invariants
/// (a masked token inside a formula span is expected).
struct CorruptionRecord {
  MathText corrupted;
  MathText original;
  std::vector<std::size_t> masked_positions;  // sorted, V_mask
  Objective objective = Objective::MLM;
  std::uint64_t rng_seed = 0;
  std::vector<MaskAction> actions;      // parallel to masked_positions
  std::vector<std::size_t> permutation;  // SSR sentence order / SFR slot mapping
  bool identity_permutation = false;     // all resamples came out identity
};

/// Samples ceil(rate * region_length) distinct positions, without
/// replacement, with probability proportional to w_i = i + 1 over the global
/// position index, skipping special tokens. With solution_only the region is
/// the solution part and the count is based on its length. Deterministic per
/// seed. Throws ValueError when nothing is maskable.
std::vector<std::size_t> sample_mask_positions(const MathText& text, double rate,
                                               std::uint64_t seed,
                                               bool solution_only = false);

/// 80% [MASK] / 10% random non-special token / 10% unchanged per position.
CorruptionRecord apply_mlm_corruption(const MathText& text,
                                      std::span<const std::size_t> positions,
                                      const Vocabulary& vocab, std::uint64_t seed);

/// Permutes sentence order in the solution region (statement untouched).
/// Resamples up to 16 times to avoid the identity permutation; if every draw
/// is identity the record is returned with identity_permutation set.
/// Returns nullopt when there are fewer than 2 sentences (caller skips).
std::optional<CorruptionRecord> shuffle_sentences(const MathText& text,
                                                  std::uint64_t seed);

/// Permutes whole formula segments across the solution's formula slots;
/// non-formula tokens keep their relative order. Returns nullopt when there
/// are fewer than 2 solution formulas.
std::optional<CorruptionRecord> shuffle_formulas(const MathText& text,
                                                 std::uint64_t seed);

struct SolutionCheckRecords {
  CorruptionRecord for_u;  // corrupted = G-decoder fills, target for L_USC
  CorruptionRecord for_g;  // corrupted = U-decoder fills, target for L_GSC
};

/// Masks solution tokens as in MLM, lets each decoder fill the masked
/// positions from a frozen model snapshot (U: per-position argmax, G: greedy
/// teacher-forced argmax) and returns the cross targets for the two
/// solution-checking losses. Implemented alongside the model internals.
SolutionCheckRecords prepare_solution_checking(const MathText& text, const Model& model,
                                               const Vocabulary& vocab,
                                               std::uint64_t seed, double rate = 0.15);

}  // namespace mathmoe
