#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mathmoe/rng.hpp"
#include "mathmoe/tensor.hpp"
#include "mathmoe/text.hpp"

namespace mathmoe {

struct Model;

/// One expert: a two-layer feed-forward block with GELU, the same shape as
/// the transformer feed-forward layer it substitutes for.
struct ExpertParams {
  Tensor w1;  // d_model x d_ff
  Tensor b1;  // d_ff
  Tensor w2;  // d_ff x d_model
  Tensor b2;  // d_model
};

/// MoE substitution for the encoder feed-forward layer: a linear router over
/// K experts with top-k sparse dispatch and multiplicative jitter noise on
/// the routing logits during training.
struct MoeLayerState {
  Tensor router_w;  // K x d_model
  std::vector<ExpertParams> experts;
  double eta = 0.0;  // jitter noise degree
  int top_k = 1;

  int num_experts() const { return static_cast<int>(experts.size()); }
  void validate() const;
};

/// Per-token routing outcome. selected holds the k largest-probability
/// expert indices, ties broken toward the lowest index; gates are the
/// unnormalized probabilities at the selected indices.
struct RoutingDecision {
  std::vector<double> probs;
  std::vector<double> logits;  // the values fed to softmax (after jitter)
  std::vector<int> selected;
  std::vector<double> gates;
};

/// Batch routing statistics. dispatch_fraction sums to top_k, mean_prob to 1.
/// mean_prob_t, when set, is the graph-connected tensor behind mean_prob so
/// the load-balance loss differentiates through the routing probabilities
/// only (dispatch counts are a stop-gradient).
struct LoadStats {
  std::vector<double> dispatch_fraction;
  std::vector<double> mean_prob;
  Tensor mean_prob_t;
};

struct MoeForward {
  Tensor output;  // n x d_model
  std::vector<RoutingDecision> decisions;
  LoadStats stats;
  Tensor router_logits;  // n x K, graph-connected
  std::uint64_t expert_macs = 0;  // multiply-adds spent inside expert blocks
  std::size_t token_count = 0;
};

/// Routes one token representation. Inspection-level (no autograd). The
/// jitter noise, when a seed is given, multiplies each logit by an
/// independent epsilon from Uniform[1-eta, 1+eta].
RoutingDecision route(std::span<const double> h, const MoeLayerState& state,
                      std::span<const double> task_prompt = {},
                      std::optional<std::uint64_t> noise_seed = std::nullopt);

/// Full differentiable forward over n token rows. The task prompt, when
/// given, is added to the router input only (experts still see h). Noise is
/// active when noise_rng is non-null; expert work is done only for
/// dispatched tokens and accounted in expert_macs.
MoeForward moe_forward(const Tensor& h, const MoeLayerState& state,
                       const Tensor* task_prompt = nullptr, Rng* noise_rng = nullptr);

/// alpha * K * sum_i f_i * mean_prob_i. Exactly alpha under uniform routing
/// and alpha * K under full collapse.
Tensor load_balance_loss(const LoadStats& stats, double alpha);

/// beta * mean over tokens of logsumexp(logits_row)^2.
Tensor z_loss(const Tensor& logits, double beta);

std::uint64_t ffn_block_macs_per_token(std::int64_t d_model, std::int64_t d_ff);

/// Token-level expert assignment table (top-1 per encoder layer).
struct RoutingReportRow {
  std::string token;
  std::string kind;
  int layer = 0;
  int expert = 0;
  double gate = 0.0;
  bool tie = false;  // top-1 and top-2 probabilities equal within tolerance
};

std::vector<RoutingReportRow> routing_report(std::span<const MathText> texts,
                                             const Model& model);
std::string routing_report_json(std::span<const RoutingReportRow> rows);

}  // namespace mathmoe
