#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mathmoe/moe.hpp"

using namespace mathmoe;

namespace {

MoeLayerState make_state(int k_experts, std::int64_t d, std::int64_t d_ff, Rng& rng,
                         double eta = 0.0, int top_k = 1) {
  MoeLayerState st;
  st.router_w = Tensor::randn({k_experts, d}, rng, 0.5, true);
  for (int e = 0; e < k_experts; ++e) {
    ExpertParams ex;
    ex.w1 = Tensor::randn({d, d_ff}, rng, 0.5, true);
    ex.b1 = Tensor::randn({d_ff}, rng, 0.1, true);
    ex.w2 = Tensor::randn({d_ff, d}, rng, 0.5, true);
    ex.b2 = Tensor::randn({d}, rng, 0.1, true);
    st.experts.push_back(std::move(ex));
  }
  st.eta = eta;
  st.top_k = top_k;
  return st;
}

// Plain-loop expert block, the oracle for the dispatch path.
std::vector<double> expert_oracle(std::span<const double> h, const ExpertParams& ex) {
  const auto d = ex.w1.dim(0), ff = ex.w1.dim(1);
  std::vector<double> mid(static_cast<std::size_t>(ff), 0.0);
  auto w1 = ex.w1.values();
  auto b1 = ex.b1.values();
  for (std::int64_t j = 0; j < ff; ++j) {
    double s = b1[static_cast<std::size_t>(j)];
    for (std::int64_t i = 0; i < d; ++i) s += h[static_cast<std::size_t>(i)] * w1[i * ff + j];
    mid[static_cast<std::size_t>(j)] = 0.5 * s * (1.0 + std::erf(s * 0.7071067811865475244));
  }
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  auto w2 = ex.w2.values();
  auto b2 = ex.b2.values();
  for (std::int64_t i = 0; i < d; ++i) {
    double s = b2[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < ff; ++j) s += mid[static_cast<std::size_t>(j)] * w2[j * d + i];
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

}  // namespace

TEST_CASE("route with a single expert") {
  Rng rng(1);
  MoeLayerState st = make_state(1, 4, 8, rng);
  std::vector<double> h = {0.3, -0.2, 1.1, 0.0};
  auto dec = route(h, st);
  CHECK(dec.probs.size() == 1);
  CHECK(dec.probs[0] == 1.0);
  CHECK(dec.selected == std::vector<int>{0});
  CHECK(dec.gates[0] == 1.0);
}

TEST_CASE("route closed-form softmax with identity router") {
  MoeLayerState st;
  st.router_w = Tensor({2, 2}, {1, 0, 0, 1});
  Rng rng(2);
  for (int e = 0; e < 2; ++e) {
    ExpertParams ex;
    ex.w1 = Tensor::randn({2, 4}, rng);
    ex.b1 = Tensor::zeros({4});
    ex.w2 = Tensor::randn({4, 2}, rng);
    ex.b2 = Tensor::zeros({2});
    st.experts.push_back(std::move(ex));
  }
  std::vector<double> h = {2.0, 0.0};
  auto dec = route(h, st);
  CHECK(dec.probs[0] == doctest::Approx(0.88079708).epsilon(1e-7));
  CHECK(dec.probs[1] == doctest::Approx(0.11920292).epsilon(1e-7));
  CHECK(dec.selected == std::vector<int>{0});
}

TEST_CASE("route rejects non-finite input") {
  Rng rng(3);
  MoeLayerState st = make_state(2, 3, 4, rng);
  std::vector<double> h = {1.0, HUGE_VAL, 0.0};
  CHECK_THROWS_AS(route(h, st), NumericError);
}

TEST_CASE("eta zero with noise seed is bit-identical to the noise-free path") {
  Rng rng(4);
  MoeLayerState st = make_state(4, 8, 16, rng, /*eta=*/0.0);
  Rng hr(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor h = Tensor::randn({1, 8}, hr);
    std::vector<double> hv(h.values().begin(), h.values().end());
    auto plain = route(hv, st);
    auto noised = route(hv, st, {}, 1234u + static_cast<std::uint64_t>(trial));
    for (std::size_t i = 0; i < plain.probs.size(); ++i) {
      CHECK(plain.logits[i] == noised.logits[i]);
      CHECK(plain.probs[i] == noised.probs[i]);
    }
    CHECK(plain.selected == noised.selected);
  }
}

TEST_CASE("jitter perturbation is bounded by eta times the logit") {
  Rng rng(6);
  const double eta = 0.3;
  MoeLayerState st = make_state(4, 8, 16, rng, eta);
  Rng hr(7);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor h = Tensor::randn({1, 8}, hr);
    std::vector<double> hv(h.values().begin(), h.values().end());
    auto plain = route(hv, st);
    auto noised = route(hv, st, {}, static_cast<std::uint64_t>(trial));
    for (std::size_t i = 0; i < plain.logits.size(); ++i)
      CHECK(std::abs(noised.logits[i] - plain.logits[i]) <=
            eta * std::abs(plain.logits[i]) + 1e-15);
  }
}

TEST_CASE("top-k selection is exact with lowest-index tie break") {
  Rng rng(8);
  MoeLayerState st = make_state(6, 4, 8, rng, 0.0, 3);
  Rng hr(9);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor h = Tensor::randn({1, 4}, hr);
    std::vector<double> hv(h.values().begin(), h.values().end());
    auto dec = route(hv, st);
    // Oracle: sort indices by (prob desc, index asc).
    std::vector<int> order(dec.probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (dec.probs[static_cast<std::size_t>(a)] != dec.probs[static_cast<std::size_t>(b)])
        return dec.probs[static_cast<std::size_t>(a)] > dec.probs[static_cast<std::size_t>(b)];
      return a < b;
    });
    for (int r = 0; r < 3; ++r) CHECK(dec.selected[static_cast<std::size_t>(r)] == order[static_cast<std::size_t>(r)]);
  }
  // Explicit tie: identical rows give identical logits; lowest index wins.
  MoeLayerState tie = make_state(3, 2, 4, rng);
  tie.router_w = Tensor({3, 2}, {1, 1, 1, 1, 1, 1});
  tie.top_k = 2;
  std::vector<double> h = {0.5, -0.25};
  auto dec = route(h, tie);
  CHECK(dec.selected == std::vector<int>{0, 1});
}

TEST_CASE("positive scaling of the input preserves logit ordering") {
  Rng rng(10);
  MoeLayerState st = make_state(5, 6, 8, rng);
  Rng hr(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor h = Tensor::randn({1, 6}, hr);
    std::vector<double> hv(h.values().begin(), h.values().end());
    std::vector<double> hs(hv);
    const double c = 0.1 + hr.uniform() * 5.0;
    for (auto& v : hs) v *= c;
    auto a = route(hv, st);
    auto b = route(hs, st);
    CHECK(a.selected[0] == b.selected[0]);
    for (std::size_t i = 0; i < a.logits.size(); ++i)
      for (std::size_t j = 0; j < a.logits.size(); ++j)
        if (a.logits[i] > a.logits[j]) CHECK(b.logits[i] >= b.logits[j]);
  }
}

TEST_CASE("dense k equals the explicit weighted summation") {
  Rng rng(12);
  const int K = 2;
  MoeLayerState st = make_state(K, 6, 12, rng, 0.0, /*top_k=*/K);
  Rng hr(13);
  Tensor h = Tensor::randn({5, 6}, hr);
  auto fwd = moe_forward(h, st);
  for (std::int64_t t = 0; t < 5; ++t) {
    std::span<const double> row(h.values().data() + t * 6, 6);
    const auto& dec = fwd.decisions[static_cast<std::size_t>(t)];
    std::vector<double> expect(6, 0.0);
    for (int e = 0; e < K; ++e) {
      auto out = expert_oracle(row, st.experts[static_cast<std::size_t>(e)]);
      for (int j = 0; j < 6; ++j) expect[static_cast<std::size_t>(j)] += dec.probs[static_cast<std::size_t>(e)] * out[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < 6; ++j)
      CHECK(std::abs(fwd.output.values()[t * 6 + j] - expect[static_cast<std::size_t>(j)]) < 1e-12);
  }
}

TEST_CASE("top-1 output equals the dense path masked to the top expert") {
  Rng rng(14);
  MoeLayerState st = make_state(4, 6, 12, rng, 0.0, 1);
  Rng hr(15);
  Tensor h = Tensor::randn({7, 6}, hr);
  auto fwd = moe_forward(h, st);
  for (std::int64_t t = 0; t < 7; ++t) {
    std::span<const double> row(h.values().data() + t * 6, 6);
    const auto& dec = fwd.decisions[static_cast<std::size_t>(t)];
    auto out = expert_oracle(row, st.experts[static_cast<std::size_t>(dec.selected[0])]);
    for (int j = 0; j < 6; ++j)
      CHECK(std::abs(fwd.output.values()[t * 6 + j] - dec.gates[0] * out[static_cast<std::size_t>(j)]) < 1e-12);
  }
}

TEST_CASE("identical experts make top-1 output routing-independent") {
  Rng rng(16);
  MoeLayerState st = make_state(1, 6, 12, rng, 0.0, 1);
  ExpertParams shared = st.experts[0];
  MoeLayerState st4 = make_state(4, 6, 12, rng, 0.0, 1);
  for (auto& e : st4.experts) e = shared;  // same parameters everywhere
  Rng hr(17);
  Tensor h = Tensor::randn({5, 6}, hr);
  auto fwd = moe_forward(h, st4);
  for (std::int64_t t = 0; t < 5; ++t) {
    std::span<const double> row(h.values().data() + t * 6, 6);
    auto out = expert_oracle(row, shared);
    const double gate = fwd.decisions[static_cast<std::size_t>(t)].gates[0];
    for (int j = 0; j < 6; ++j)
      CHECK(fwd.output.values()[t * 6 + j] ==
            doctest::Approx(gate * out[static_cast<std::size_t>(j)]).epsilon(1e-12));
  }
}

TEST_CASE("load balance loss extremes are exact") {
  for (int K : {2, 4, 8}) {
    const double alpha = 1e-3;
    LoadStats uniform;
    uniform.dispatch_fraction.assign(static_cast<std::size_t>(K), 1.0 / K);
    uniform.mean_prob.assign(static_cast<std::size_t>(K), 1.0 / K);
    CHECK(load_balance_loss(uniform, alpha).value() == alpha);

    LoadStats collapsed;
    collapsed.dispatch_fraction.assign(static_cast<std::size_t>(K), 0.0);
    collapsed.mean_prob.assign(static_cast<std::size_t>(K), 0.0);
    collapsed.dispatch_fraction[0] = 1.0;
    collapsed.mean_prob[0] = 1.0;
    CHECK(load_balance_loss(collapsed, alpha).value() == alpha * K);
  }
  // Arithmetic oracle case.
  LoadStats s;
  s.dispatch_fraction = {0.75, 0.25};
  s.mean_prob = {0.6, 0.4};
  CHECK(load_balance_loss(s, 1.0).value() == doctest::Approx(1.1).epsilon(1e-12));
}

TEST_CASE("z loss closed forms") {
  const double beta = 1e-4;
  Tensor two({1, 2}, {0.0, 0.0});
  const double ln2 = std::log(2.0);
  CHECK(z_loss(two, beta).value() == doctest::Approx(beta * ln2 * ln2).epsilon(1e-12));

  Tensor one({1, 1}, {3.0});
  CHECK(z_loss(one, beta).value() == doctest::Approx(beta * 9.0).epsilon(1e-12));

  Tensor hi({1, 2}, {5.0, 5.0});
  const double expect = beta * (5.0 + ln2) * (5.0 + ln2);
  CHECK(z_loss(hi, beta).value() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(z_loss(hi, beta).value() > z_loss(two, beta).value());
}

TEST_CASE("top-1 expert multiply-adds equal one feed-forward block") {
  Rng rng(18);
  MoeLayerState st = make_state(4, 16, 32, rng, 0.0, 1);
  Rng hr(19);
  Tensor h = Tensor::randn({9, 16}, hr);
  auto fwd = moe_forward(h, st);
  CHECK(fwd.expert_macs ==
        static_cast<std::uint64_t>(9) * ffn_block_macs_per_token(16, 32));
  // Dense routing costs K times as much.
  st.top_k = 4;
  auto dense = moe_forward(h, st);
  CHECK(dense.expert_macs == 4 * fwd.expert_macs);
}

TEST_CASE("routing probabilities sum to one and stats are consistent") {
  Rng rng(20);
  MoeLayerState st = make_state(4, 8, 16, rng, 0.1, 2);
  Rng hr(21);
  Tensor h = Tensor::randn({16, 8}, hr);
  Rng noise(22);
  auto fwd = moe_forward(h, st, nullptr, &noise);
  for (const auto& dec : fwd.decisions) {
    double s = 0.0;
    for (double p : dec.probs) s += p;
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  double df = 0.0, mp = 0.0;
  for (double v : fwd.stats.dispatch_fraction) df += v;
  for (double v : fwd.stats.mean_prob) mp += v;
  CHECK(df == doctest::Approx(2.0).epsilon(1e-9));  // sums to k
  CHECK(mp == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("moe forward with auxiliary losses passes grad check") {
  const std::int64_t d = 4, ff = 6;
  const int K = 3;
  Rng rng(23);
  Tensor h = Tensor::randn({3, d}, rng, 0.7);
  Tensor w = Tensor::randn({K, d}, rng, 0.7);
  std::vector<Tensor> inputs = {h, w};
  for (int e = 0; e < K; ++e) {
    inputs.push_back(Tensor::randn({d, ff}, rng, 0.5));
    inputs.push_back(Tensor::randn({ff}, rng, 0.1));
    inputs.push_back(Tensor::randn({ff, d}, rng, 0.5));
    inputs.push_back(Tensor::randn({d}, rng, 0.1));
  }
  auto f = [K](const std::vector<Tensor>& xs) {
    MoeLayerState st;
    st.router_w = xs[1];
    st.eta = 0.2;
    st.top_k = 1;
    for (int e = 0; e < K; ++e) {
      ExpertParams ex;
      ex.w1 = xs[static_cast<std::size_t>(2 + 4 * e)];
      ex.b1 = xs[static_cast<std::size_t>(3 + 4 * e)];
      ex.w2 = xs[static_cast<std::size_t>(4 + 4 * e)];
      ex.b2 = xs[static_cast<std::size_t>(5 + 4 * e)];
      st.experts.push_back(std::move(ex));
    }
    Rng noise(777);  // frozen per-sample noise
    auto fwd = moe_forward(xs[0], st, nullptr, &noise);
    Tensor loss = sum(square(fwd.output));
    loss = add(loss, load_balance_loss(fwd.stats, 1e-3));
    loss = add(loss, z_loss(fwd.router_logits, 1e-4));
    return loss;
  };
  CHECK(grad_check(f, inputs) < 1e-4);
}

TEST_CASE("task prompt shifts routing logits but not expert inputs") {
  Rng rng(24);
  MoeLayerState st = make_state(3, 5, 8, rng);
  Rng hr(25);
  Tensor h = Tensor::randn({4, 5}, hr);
  Tensor prompt = Tensor::randn({5}, hr);
  auto base = moe_forward(h, st);
  auto with_prompt = moe_forward(h, st, &prompt);
  bool logits_differ = false;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t e = 0; e < 3; ++e)
      if (base.decisions[t].logits[e] != with_prompt.decisions[t].logits[e])
        logits_differ = true;
  CHECK(logits_differ);
  // When routing happens to agree, expert outputs agree: experts see h only.
  for (std::size_t t = 0; t < 4; ++t) {
    if (base.decisions[t].selected == with_prompt.decisions[t].selected &&
        base.decisions[t].gates[0] == doctest::Approx(with_prompt.decisions[t].gates[0])) {
      for (std::int64_t j = 0; j < 5; ++j)
        CHECK(base.output.values()[t * 5 + static_cast<std::size_t>(j)] ==
              doctest::Approx(with_prompt.output.values()[t * 5 + static_cast<std::size_t>(j)]));
    }
  }
}
