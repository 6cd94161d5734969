#include "mathmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mathmoe {

void MoeLayerState::validate() const {
  if (experts.empty()) throw ValueError("moe layer needs at least one expert");
  if (top_k < 1 || top_k > num_experts())
    throw ValueError("top_k must be in [1, K]");
  if (eta < 0.0) throw ValueError("jitter degree must be non-negative");
  const auto& first = experts.front();
  for (const auto& e : experts) {
    if (e.w1.shape() != first.w1.shape() || e.w2.shape() != first.w2.shape())
      throw ShapeError("expert blocks must share identical shapes");
  }
  if (router_w.dim(0) != num_experts())
    throw ShapeError("router rows must equal expert count");
}

namespace {

// Top-k indices by probability, ties broken toward the lowest index.
std::vector<int> top_k_indices(std::span<const double> probs, int k) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)])
      return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

std::vector<double> softmax_row(std::span<const double> logits) {
  double mx = -HUGE_VAL;
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> out(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    denom += out[i];
  }
  for (auto& v : out) v /= denom;
  return out;
}

}  // namespace

RoutingDecision route(std::span<const double> h, const MoeLayerState& state,
                      std::span<const double> task_prompt,
                      std::optional<std::uint64_t> noise_seed) {
  state.validate();
  const auto d = state.router_w.dim(1);
  if (static_cast<std::int64_t>(h.size()) != d)
    throw ShapeError("route: representation width mismatch");
  if (!all_finite(h)) throw NumericError("route: non-finite input");
  if (!task_prompt.empty() && static_cast<std::int64_t>(task_prompt.size()) != d)
    throw ShapeError("route: task prompt width mismatch");

  const int k_experts = state.num_experts();
  RoutingDecision dec;
  dec.logits.resize(static_cast<std::size_t>(k_experts));
  auto wv = state.router_w.values();
  for (int e = 0; e < k_experts; ++e) {
    double s = 0.0;
    const double* row = wv.data() + static_cast<std::int64_t>(e) * d;
    for (std::int64_t j = 0; j < d; ++j) {
      const double x = task_prompt.empty() ? h[static_cast<std::size_t>(j)]
                                           : h[static_cast<std::size_t>(j)] +
                                                 task_prompt[static_cast<std::size_t>(j)];
      s += row[j] * x;
    }
    dec.logits[static_cast<std::size_t>(e)] = s;
  }
  if (noise_seed) {
    Rng rng(*noise_seed);
    for (auto& l : dec.logits) l *= rng.uniform(1.0 - state.eta, 1.0 + state.eta);
  }
  dec.probs = softmax_row(dec.logits);
  dec.selected = top_k_indices(dec.probs, state.top_k);
  for (int e : dec.selected) dec.gates.push_back(dec.probs[static_cast<std::size_t>(e)]);
  return dec;
}

MoeForward moe_forward(const Tensor& h, const MoeLayerState& state,
                       const Tensor* task_prompt, Rng* noise_rng) {
  state.validate();
  if (h.rank() != 2) throw ShapeError("moe_forward: expected n x d_model input");
  const auto n = h.dim(0), d = h.dim(1);
  const int k_experts = state.num_experts();
  const int top_k = state.top_k;
  const auto d_ff = state.experts.front().w1.dim(1);

  Tensor router_in = h;
  if (task_prompt) {
    if (task_prompt->size() != d) throw ShapeError("moe_forward: prompt width mismatch");
    Tensor p = *task_prompt;
    if (p.rank() != 1) p = reshape(p, {d});
    router_in = add_rowvec(h, p);
  }
  Tensor logits = matmul(router_in, transpose(state.router_w));
  if (noise_rng) {
    std::vector<double> eps(static_cast<std::size_t>(n * k_experts));
    for (auto& e : eps) e = noise_rng->uniform(1.0 - state.eta, 1.0 + state.eta);
    logits = mul(logits, Tensor({n, k_experts}, std::move(eps)));
  }
  Tensor probs = softmax(logits, -1);
  if (!all_finite(probs.values())) throw NumericError("moe_forward: non-finite routing");

  MoeForward out;
  out.router_logits = logits;
  out.token_count = static_cast<std::size_t>(n);
  out.decisions.resize(static_cast<std::size_t>(n));
  auto pv = probs.values();
  auto lv = logits.values();
  for (std::int64_t t = 0; t < n; ++t) {
    auto& dec = out.decisions[static_cast<std::size_t>(t)];
    dec.probs.assign(pv.begin() + t * k_experts, pv.begin() + (t + 1) * k_experts);
    dec.logits.assign(lv.begin() + t * k_experts, lv.begin() + (t + 1) * k_experts);
    dec.selected = top_k_indices(dec.probs, top_k);
    for (int e : dec.selected) dec.gates.push_back(dec.probs[static_cast<std::size_t>(e)]);
  }

  // Dispatch: for each selection rank, group tokens by expert so each
  // expert runs once per group. Gradients flow through gates and experts.
  Tensor combined = Tensor::zeros({n, d});
  for (int rank = 0; rank < top_k; ++rank) {
    for (int e = 0; e < k_experts; ++e) {
      std::vector<std::int64_t> rows;
      for (std::int64_t t = 0; t < n; ++t)
        if (out.decisions[static_cast<std::size_t>(t)].selected[static_cast<std::size_t>(rank)] == e)
          rows.push_back(t);
      if (rows.empty()) continue;
      const auto& ex = state.experts[static_cast<std::size_t>(e)];
      Tensor sub = gather_rows(h, rows);
      Tensor mid = gelu(add_rowvec(matmul(sub, ex.w1), ex.b1));
      Tensor expert_out = add_rowvec(matmul(mid, ex.w2), ex.b2);
      out.expert_macs += static_cast<std::uint64_t>(rows.size()) *
                         ffn_block_macs_per_token(d, d_ff);
      // Gate values: probs[row, e] for each dispatched row.
      std::vector<std::int64_t> cols(rows.size(), e);
      Tensor gates = take(gather_rows(probs, rows), cols);
      combined = add(combined, scatter_rows(mul_colvec(expert_out, gates), rows, n));
    }
  }
  out.output = combined;

  // Load statistics: dispatch counts are a stop-gradient, mean probabilities
  // stay connected to the graph through probs.
  out.stats.dispatch_fraction.assign(static_cast<std::size_t>(k_experts), 0.0);
  for (const auto& dec : out.decisions)
    for (int e : dec.selected)
      out.stats.dispatch_fraction[static_cast<std::size_t>(e)] += 1.0;
  for (auto& f : out.stats.dispatch_fraction) f /= static_cast<double>(n);
  Tensor ones({1, n}, std::vector<double>(static_cast<std::size_t>(n), 1.0));
  out.stats.mean_prob_t = scale(matmul(ones, probs), 1.0 / static_cast<double>(n));
  auto mp = out.stats.mean_prob_t.values();
  out.stats.mean_prob.assign(mp.begin(), mp.end());
  return out;
}

Tensor load_balance_loss(const LoadStats& stats, double alpha) {
  const auto k = static_cast<std::int64_t>(stats.dispatch_fraction.size());
  if (k == 0 || stats.mean_prob.size() != stats.dispatch_fraction.size())
    throw ValueError("load_balance_loss: empty or inconsistent stats");
  Tensor mean_prob = stats.mean_prob_t.defined()
                         ? stats.mean_prob_t
                         : Tensor({1, k}, {stats.mean_prob.begin(), stats.mean_prob.end()});
  Tensor f({1, k}, {stats.dispatch_fraction.begin(), stats.dispatch_fraction.end()});
  return scale(sum(mul(f, mean_prob)), alpha * static_cast<double>(k));
}

Tensor z_loss(const Tensor& logits, double beta) {
  if (logits.rank() != 2 || logits.dim(0) < 1)
    throw ShapeError("z_loss: expected n x K logits with n >= 1");
  return scale(mean(square(logsumexp(logits, -1))), beta);
}

std::uint64_t ffn_block_macs_per_token(std::int64_t d_model, std::int64_t d_ff) {
  return 2ULL * static_cast<std::uint64_t>(d_model) * static_cast<std::uint64_t>(d_ff);
}

}  // namespace mathmoe
