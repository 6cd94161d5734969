#include "mathmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace mathmoe {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

void accumulate(TensorImpl* t, const std::vector<double>& g) {
  if (!t->requires_grad) return;
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
}

using Impl = std::shared_ptr<TensorImpl>;

Tensor make_node(std::vector<std::int64_t> shape, std::vector<double> data,
                 std::vector<Impl> parents,
                 std::function<void(const std::vector<double>&)> backward_fn) {
  Tensor t(std::move(shape), std::move(data), false);
  auto impl = t.impl();
  for (const auto& p : parents)
    if (p->requires_grad) impl->requires_grad = true;
  if (impl->requires_grad) {
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(backward_fn);
  }
  return t;
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

struct Lanes {
  std::int64_t outer, len, inner;
};

Lanes lanes_for(const std::vector<std::int64_t>& shape, int axis) {
  Lanes l{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) l.outer *= shape[i];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) l.inner *= shape[i];
  return l;
}

// C(m,n) += A(m,k) * B(k,n)
void gemm_nn(std::int64_t m, std::int64_t k, std::int64_t n, const double* a,
             const double* b, double* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> data,
               bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double v, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<std::int64_t> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& x : data) x = rng.normal() * stddev;
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

const std::vector<std::int64_t>& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::size() const {
  return static_cast<std::int64_t>(impl_->data.size());
}

std::int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  return impl_->shape.at(static_cast<std::size_t>(i));
}

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

double Tensor::value() const {
  if (size() != 1) throw ShapeError("value() on non-scalar tensor");
  return impl_->data[0];
}

double Tensor::at(std::span<const std::int64_t> index) const {
  if (index.size() != impl_->shape.size()) throw ShapeError("index rank mismatch");
  std::int64_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= impl_->shape[i]) throw ShapeError("index out of range");
    flat = flat * impl_->shape[i] + index[i];
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

std::span<const double> Tensor::values() const { return impl_->data; }

std::vector<double>& Tensor::mutable_data() { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward() requires a scalar root");
  // Iterative DFS postorder; reversed postorder is a topological order with
  // every consumer before its inputs.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  impl_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(node->grad);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto pa = a.impl(), pb = b.impl();
  return make_node(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const std::vector<double>& g) {
                     accumulate(pa.get(), g);
                     accumulate(pb.get(), g);
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto pa = a.impl(), pb = b.impl();
  return make_node(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const std::vector<double>& g) {
                     accumulate(pa.get(), g);
                     if (pb->requires_grad) {
                       std::vector<double> ng(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                       accumulate(pb.get(), ng);
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.impl(), pb = b.impl();
  return make_node(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const std::vector<double>& g) {
                     if (pa->requires_grad) {
                       std::vector<double> ga(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i)
                         ga[i] = g[i] * pb->data[i];
                       accumulate(pa.get(), ga);
                     }
                     if (pb->requires_grad) {
                       std::vector<double> gb(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gb[i] = g[i] * pa->data[i];
                       accumulate(pb.get(), gb);
                     }
                   });
}

Tensor scale(const Tensor& a, double s) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto pa = a.impl();
  return make_node(a.shape(), std::move(out), {pa},
                   [pa, s](const std::vector<double>& g) {
                     std::vector<double> ga(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
                     accumulate(pa.get(), ga);
                   });
}

Tensor add_scalar(const Tensor& a, double s) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  auto pa = a.impl();
  return make_node(a.shape(), std::move(out), {pa},
                   [pa](const std::vector<double>& g) { accumulate(pa.get(), g); });
}

namespace {

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfn dfdx) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto pa = a.impl();
  return make_node(a.shape(), std::move(out), {pa},
                   [pa, dfdx](const std::vector<double>& g) {
                     std::vector<double> ga(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] = g[i] * dfdx(pa->data[i]);
                     accumulate(pa.get(), ga);
                   });
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x)); },
      [](double x) {
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
        return s * (1.0 - s);
      });
}

Tensor tanh_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw ShapeError("add_rowvec: expected (m,n) and (n)");
  const auto m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  auto vv = v.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + vv[j];
  auto px = x.impl(), pv = v.impl();
  return make_node(x.shape(), std::move(out), {px, pv},
                   [px, pv, m, n](const std::vector<double>& g) {
                     accumulate(px.get(), g);
                     if (pv->requires_grad) {
                       std::vector<double> gv(static_cast<std::size_t>(n), 0.0);
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
                       accumulate(pv.get(), gv);
                     }
                   });
}

Tensor mul_colvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(0))
    throw ShapeError("mul_colvec: expected (m,n) and (m)");
  const auto m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  auto vv = v.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * vv[i];
  auto px = x.impl(), pv = v.impl();
  return make_node(x.shape(), std::move(out), {px, pv},
                   [px, pv, m, n](const std::vector<double>& g) {
                     if (px->requires_grad) {
                       std::vector<double> gx(g.size());
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < n; ++j)
                           gx[i * n + j] = g[i * n + j] * pv->data[i];
                       accumulate(px.get(), gx);
                     }
                     if (pv->requires_grad) {
                       std::vector<double> gv(static_cast<std::size_t>(m), 0.0);
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < n; ++j)
                           gv[i] += g[i * n + j] * px->data[i * n + j];
                       accumulate(pv.get(), gv);
                     }
                   });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected 2-D operands");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  auto pa = a.impl(), pb = b.impl();
  return make_node({m, n}, std::move(out), {pa, pb},
                   [pa, pb, m, k, n](const std::vector<double>& g) {
                     if (pa->requires_grad) {
                       // dA = dC * B^T
                       std::vector<double> ga(static_cast<std::size_t>(m * k), 0.0);
                       const double* bd = pb->data.data();
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t p = 0; p < k; ++p) {
                           double s = 0.0;
                           const double* grow = g.data() + i * n;
                           const double* brow = bd + p * n;
                           for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                           ga[i * k + p] = s;
                         }
                       accumulate(pa.get(), ga);
                     }
                     if (pb->requires_grad) {
                       // dB = A^T * dC
                       std::vector<double> gb(static_cast<std::size_t>(k * n), 0.0);
                       const double* ad = pa->data.data();
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t p = 0; p < k; ++p) {
                           const double av = ad[i * k + p];
                           if (av == 0.0) continue;
                           double* brow = gb.data() + p * n;
                           const double* grow = g.data() + i * n;
                           for (std::int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                         }
                       accumulate(pb.get(), gb);
                     }
                   });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected 2-D");
  const auto m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  auto px = x.impl();
  return make_node({n, m}, std::move(out), {px},
                   [px, m, n](const std::vector<double>& g) {
                     std::vector<double> gx(g.size());
                     for (std::int64_t i = 0; i < m; ++i)
                       for (std::int64_t j = 0; j < n; ++j)
                         gx[i * n + j] = g[j * m + i];
                     accumulate(px.get(), gx);
                   });
}

// ---------------------------------------------------------------------------
// reductions / normalization
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto px = x.impl();
  return make_node({}, {s}, {px}, [px](const std::vector<double>& g) {
    std::vector<double> gx(px->data.size(), g[0]);
    accumulate(px.get(), gx);
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const auto ln = lanes_for(x.shape(), ax);
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::int64_t o = 0; o < ln.outer; ++o)
    for (std::int64_t i = 0; i < ln.inner; ++i) {
      double mx = -HUGE_VAL;
      for (std::int64_t j = 0; j < ln.len; ++j)
        mx = std::max(mx, xv[(o * ln.len + j) * ln.inner + i]);
      double denom = 0.0;
      for (std::int64_t j = 0; j < ln.len; ++j) {
        const auto idx = (o * ln.len + j) * ln.inner + i;
        out[idx] = std::exp(xv[idx] - mx);
        denom += out[idx];
      }
      for (std::int64_t j = 0; j < ln.len; ++j) out[(o * ln.len + j) * ln.inner + i] /= denom;
    }
  auto px = x.impl();
  auto saved = out;  // y values for the backward pass
  return make_node(x.shape(), std::move(out), {px},
                   [px, saved = std::move(saved), ln](const std::vector<double>& g) {
                     std::vector<double> gx(g.size());
                     for (std::int64_t o = 0; o < ln.outer; ++o)
                       for (std::int64_t i = 0; i < ln.inner; ++i) {
                         double dot = 0.0;
                         for (std::int64_t j = 0; j < ln.len; ++j) {
                           const auto idx = (o * ln.len + j) * ln.inner + i;
                           dot += g[idx] * saved[idx];
                         }
                         for (std::int64_t j = 0; j < ln.len; ++j) {
                           const auto idx = (o * ln.len + j) * ln.inner + i;
                           gx[idx] = saved[idx] * (g[idx] - dot);
                         }
                       }
                     accumulate(px.get(), gx);
                   });
}

Tensor logsumexp(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const auto ln = lanes_for(x.shape(), ax);
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(ln.outer * ln.inner));
  std::vector<double> soft(xv.size());
  for (std::int64_t o = 0; o < ln.outer; ++o)
    for (std::int64_t i = 0; i < ln.inner; ++i) {
      double mx = -HUGE_VAL;
      for (std::int64_t j = 0; j < ln.len; ++j)
        mx = std::max(mx, xv[(o * ln.len + j) * ln.inner + i]);
      double denom = 0.0;
      for (std::int64_t j = 0; j < ln.len; ++j) {
        const auto idx = (o * ln.len + j) * ln.inner + i;
        soft[idx] = std::exp(xv[idx] - mx);
        denom += soft[idx];
      }
      for (std::int64_t j = 0; j < ln.len; ++j)
        soft[(o * ln.len + j) * ln.inner + i] /= denom;
      out[o * ln.inner + i] = mx + std::log(denom);
    }
  std::vector<std::int64_t> out_shape = x.shape();
  out_shape.erase(out_shape.begin() + ax);
  auto px = x.impl();
  return make_node(std::move(out_shape), std::move(out), {px},
                   [px, soft = std::move(soft), ln](const std::vector<double>& g) {
                     std::vector<double> gx(soft.size());
                     for (std::int64_t o = 0; o < ln.outer; ++o)
                       for (std::int64_t i = 0; i < ln.inner; ++i) {
                         const double go = g[o * ln.inner + i];
                         for (std::int64_t j = 0; j < ln.len; ++j) {
                           const auto idx = (o * ln.len + j) * ln.inner + i;
                           gx[idx] = go * soft[idx];
                         }
                       }
                     accumulate(px.get(), gx);
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
  const auto d = x.shape().back();
  if (d < 1) throw ShapeError("layer_norm: last axis length >= 1 required");
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must have last-axis length");
  const auto rows = x.size() / d;
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  auto px = x.impl(), pg = gain.impl(), pb = bias.impl();
  return make_node(
      x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       d](const std::vector<double>& g) {
        if (px->requires_grad) {
          std::vector<double> gx(g.size());
          for (std::int64_t r = 0; r < rows; ++r) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
              const double dxh = g[r * d + j] * pg->data[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xhat[r * d + j];
            }
            mean_dxh /= static_cast<double>(d);
            mean_dxh_xh /= static_cast<double>(d);
            const double is = inv_std[static_cast<std::size_t>(r)];
            for (std::int64_t j = 0; j < d; ++j) {
              const double dxh = g[r * d + j] * pg->data[j];
              gx[r * d + j] = is * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
            }
          }
          accumulate(px.get(), gx);
        }
        if (pg->requires_grad || pb->requires_grad) {
          std::vector<double> gg(static_cast<std::size_t>(d), 0.0);
          std::vector<double> gb(static_cast<std::size_t>(d), 0.0);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xhat[r * d + j];
              gb[j] += g[r * d + j];
            }
          accumulate(pg.get(), gg);
          accumulate(pb.get(), gb);
        }
      });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::int64_t ignore_index) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be 2-D");
  const auto n = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw ShapeError("cross_entropy: target count mismatch");
  auto lv = logits.values();
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  std::int64_t count = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int64_t t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= v) throw ValueError("cross_entropy: target out of range");
    const double* row = lv.data() + r * v;
    double mx = -HUGE_VAL;
    for (std::int64_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      denom += probs[r * v + j];
    }
    for (std::int64_t j = 0; j < v; ++j) probs[r * v + j] /= denom;
    loss += (mx + std::log(denom)) - row[t];
    ++count;
  }
  if (count == 0) throw ValueError("cross_entropy: undefined loss, all positions ignored");
  loss /= static_cast<double>(count);
  auto pl = logits.impl();
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  return make_node(
      {}, {loss}, {pl},
      [pl, probs = std::move(probs), tgt = std::move(tgt), ignore_index, n, v,
       count](const std::vector<double>& g) {
        std::vector<double> gl(pl->data.size(), 0.0);
        const double w = g[0] / static_cast<double>(count);
        for (std::int64_t r = 0; r < n; ++r) {
          const std::int64_t t = tgt[static_cast<std::size_t>(r)];
          if (t == ignore_index) continue;
          for (std::int64_t j = 0; j < v; ++j) gl[r * v + j] = w * probs[r * v + j];
          gl[r * v + t] -= w;
        }
        accumulate(pl.get(), gl);
      });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (static_cast<std::size_t>(logits.size()) != targets.size())
    throw ShapeError("bce_with_logits: size mismatch");
  if (logits.size() == 0) throw ShapeError("bce_with_logits: empty input");
  auto lv = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = lv[i], t = targets[i];
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  const auto n = static_cast<double>(targets.size());
  loss /= n;
  auto pl = logits.impl();
  std::vector<double> tgt(targets.begin(), targets.end());
  return make_node({}, {loss}, {pl},
                   [pl, tgt = std::move(tgt), n](const std::vector<double>& g) {
                     std::vector<double> gl(pl->data.size());
                     for (std::size_t i = 0; i < gl.size(); ++i) {
                       const double z = pl->data[i];
                       const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                                 : std::exp(z) / (1.0 + std::exp(z));
                       gl[i] = g[0] * (s - tgt[i]) / n;
                     }
                     accumulate(pl.get(), gl);
                   });
}

// ---------------------------------------------------------------------------
// indexing / structure
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
  const auto v = table.dim(0), d = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  auto tv = table.values();
  std::vector<double> out(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= v) throw ValueError("embedding: id out of range");
    std::copy_n(tv.data() + id * d, d, out.data() + i * d);
  }
  auto pt = table.impl();
  std::vector<std::int64_t> idv(ids.begin(), ids.end());
  return make_node({n, d}, std::move(out), {pt},
                   [pt, idv = std::move(idv), d](const std::vector<double>& g) {
                     // Gradients flow only into the selected rows.
                     std::vector<double> gt(pt->data.size(), 0.0);
                     for (std::size_t i = 0; i < idv.size(); ++i) {
                       double* row = gt.data() + idv[i] * d;
                       const double* grow = g.data() + static_cast<std::int64_t>(i) * d;
                       for (std::int64_t j = 0; j < d; ++j) row[j] += grow[j];
                     }
                     accumulate(pt.get(), gt);
                   });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts)
    if (p.rank() != 2) throw ShapeError("concat: expected 2-D inputs");
  std::int64_t rows = 0, cols = 0;
  if (axis == 0) {
    cols = parts[0].dim(1);
    for (const auto& p : parts) {
      if (p.dim(1) != cols) throw ShapeError("concat: column mismatch");
      rows += p.dim(0);
    }
  } else {
    rows = parts[0].dim(0);
    for (const auto& p : parts) {
      if (p.dim(0) != rows) throw ShapeError("concat: row mismatch");
      cols += p.dim(1);
    }
  }
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  std::vector<Impl> impls;
  std::vector<std::int64_t> sizes;  // rows (axis 0) or cols (axis 1) per part
  std::int64_t off = 0;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    auto pv = p.values();
    if (axis == 0) {
      std::copy(pv.begin(), pv.end(), out.begin() + off * cols);
      sizes.push_back(p.dim(0));
      off += p.dim(0);
    } else {
      const auto pc = p.dim(1);
      for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(pv.data() + r * pc, pc, out.data() + r * cols + off);
      sizes.push_back(pc);
      off += pc;
    }
  }
  return make_node({rows, cols}, std::move(out), impls,
                   [impls, sizes, axis, rows, cols](const std::vector<double>& g) {
                     std::int64_t off = 0;
                     for (std::size_t p = 0; p < impls.size(); ++p) {
                       auto& t = impls[p];
                       if (t->requires_grad) {
                         std::vector<double> gp(t->data.size());
                         if (axis == 0) {
                           std::copy_n(g.data() + off * cols, sizes[p] * cols, gp.data());
                         } else {
                           for (std::int64_t r = 0; r < rows; ++r)
                             std::copy_n(g.data() + r * cols + off, sizes[p],
                                         gp.data() + r * sizes[p]);
                         }
                         accumulate(t.get(), gp);
                       }
                       off += sizes[p];
                     }
                   });
}

Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1) {
  if (x.rank() != 2) throw ShapeError("slice_cols: expected 2-D");
  const auto m = x.dim(0), n = x.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad range");
  const auto w = c1 - c0;
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(m * w));
  for (std::int64_t r = 0; r < m; ++r)
    std::copy_n(xv.data() + r * n + c0, w, out.data() + r * w);
  auto px = x.impl();
  return make_node({m, w}, std::move(out), {px},
                   [px, m, n, c0, w](const std::vector<double>& g) {
                     std::vector<double> gx(px->data.size(), 0.0);
                     for (std::int64_t r = 0; r < m; ++r)
                       std::copy_n(g.data() + r * w, w, gx.data() + r * n + c0);
                     accumulate(px.get(), gx);
                   });
}

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected 2-D");
  const auto m = x.dim(0), n = x.dim(1);
  auto xv = x.values();
  const auto k = static_cast<std::int64_t>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(k * n));
  for (std::int64_t i = 0; i < k; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= m) throw ShapeError("gather_rows: row out of range");
    std::copy_n(xv.data() + r * n, n, out.data() + i * n);
  }
  auto px = x.impl();
  std::vector<std::int64_t> rv(rows.begin(), rows.end());
  return make_node({k, n}, std::move(out), {px},
                   [px, rv = std::move(rv), n](const std::vector<double>& g) {
                     std::vector<double> gx(px->data.size(), 0.0);
                     for (std::size_t i = 0; i < rv.size(); ++i) {
                       double* dst = gx.data() + rv[i] * n;
                       const double* src = g.data() + static_cast<std::int64_t>(i) * n;
                       for (std::int64_t j = 0; j < n; ++j) dst[j] += src[j];
                     }
                     accumulate(px.get(), gx);
                   });
}

Tensor scatter_rows(const Tensor& x, std::span<const std::int64_t> rows,
                    std::int64_t total_rows) {
  if (x.rank() != 2) throw ShapeError("scatter_rows: expected 2-D");
  if (static_cast<std::int64_t>(rows.size()) != x.dim(0))
    throw ShapeError("scatter_rows: row index count mismatch");
  const auto n = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(total_rows * n), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    if (r < 0 || r >= total_rows) throw ShapeError("scatter_rows: row out of range");
    std::copy_n(xv.data() + static_cast<std::int64_t>(i) * n, n, out.data() + r * n);
  }
  auto px = x.impl();
  std::vector<std::int64_t> rv(rows.begin(), rows.end());
  return make_node({total_rows, n}, std::move(out), {px},
                   [px, rv = std::move(rv), n](const std::vector<double>& g) {
                     std::vector<double> gx(px->data.size());
                     for (std::size_t i = 0; i < rv.size(); ++i)
                       std::copy_n(g.data() + rv[i] * n, n,
                                   gx.data() + static_cast<std::int64_t>(i) * n);
                     accumulate(px.get(), gx);
                   });
}

Tensor take(const Tensor& x, std::span<const std::int64_t> cols) {
  if (x.rank() != 2) throw ShapeError("take: expected 2-D");
  const auto m = x.dim(0), n = x.dim(1);
  if (static_cast<std::int64_t>(cols.size()) != m)
    throw ShapeError("take: index count mismatch");
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const auto c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= n) throw ShapeError("take: column out of range");
    out[static_cast<std::size_t>(i)] = xv[i * n + c];
  }
  auto px = x.impl();
  std::vector<std::int64_t> cv(cols.begin(), cols.end());
  return make_node({m}, std::move(out), {px},
                   [px, cv = std::move(cv), n](const std::vector<double>& g) {
                     std::vector<double> gx(px->data.size(), 0.0);
                     for (std::size_t i = 0; i < cv.size(); ++i)
                       gx[static_cast<std::int64_t>(i) * n + cv[i]] = g[i];
                     accumulate(px.get(), gx);
                   });
}

Tensor mask_fill(const Tensor& x, const std::vector<bool>& mask, double value) {
  if (static_cast<std::int64_t>(mask.size()) != x.size())
    throw ShapeError("mask_fill: mask size mismatch");
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? value : xv[i];
  auto px = x.impl();
  return make_node(x.shape(), std::move(out), {px},
                   [px, mask](const std::vector<double>& g) {
                     std::vector<double> gx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i)
                       gx[i] = mask[i] ? 0.0 : g[i];
                     accumulate(px.get(), gx);
                   });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ValueError("dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  const double keep = 1.0 - rate;
  auto xv = x.values();
  std::vector<double> mask(xv.size());
  for (auto& m : mask) m = rng.uniform() >= rate ? 1.0 / keep : 0.0;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto px = x.impl();
  return make_node(x.shape(), std::move(out), {px},
                   [px, mask = std::move(mask)](const std::vector<double>& g) {
                     std::vector<double> gx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i];
                     accumulate(px.get(), gx);
                   });
}

Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape) {
  if (shape_numel(shape) != x.size()) throw ShapeError("reshape: element count mismatch");
  auto px = x.impl();
  std::vector<double> data(x.values().begin(), x.values().end());
  return make_node(std::move(shape), std::move(data), {px},
                   [px](const std::vector<double>& g) { accumulate(px.get(), g); });
}

std::vector<std::int64_t> argmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const auto ln = lanes_for(x.shape(), ax);
  auto xv = x.values();
  std::vector<std::int64_t> out(static_cast<std::size_t>(ln.outer * ln.inner));
  for (std::int64_t o = 0; o < ln.outer; ++o)
    for (std::int64_t i = 0; i < ln.inner; ++i) {
      std::int64_t best = 0;
      double bv = xv[(o * ln.len) * ln.inner + i];
      for (std::int64_t j = 1; j < ln.len; ++j) {
        const double v = xv[(o * ln.len + j) * ln.inner + i];
        if (v > bv) {  // strict: ties keep the lowest index
          bv = v;
          best = j;
        }
      }
      out[o * ln.inner + i] = best;
    }
  return out;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double step) {
  auto clone_inputs = [&](bool requires_grad) {
    std::vector<Tensor> xs;
    xs.reserve(inputs.size());
    for (const auto& t : inputs) {
      std::vector<double> d(t.values().begin(), t.values().end());
      xs.emplace_back(t.shape(), std::move(d), requires_grad);
    }
    return xs;
  };

  auto xs = clone_inputs(true);
  Tensor y = f(xs);
  if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  y.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : xs) {
    auto g = t.grad();
    if (!all_finite(g)) throw NumericError("grad_check: non-finite gradient");
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(t.size()), 0.0);
  }

  double max_err = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    for (std::int64_t j = 0; j < inputs[ti].size(); ++j) {
      auto eval = [&](double delta) {
        auto zs = clone_inputs(false);
        zs[ti].mutable_data()[static_cast<std::size_t>(j)] += delta;
        return f(zs).value();
      };
      const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
      const double a = analytic[ti][static_cast<std::size_t>(j)];
      const double denom = std::max(std::abs(a), std::abs(numeric));
      const double err = denom < 1e-6 ? std::abs(a - numeric)
                                      : std::abs(a - numeric) / denom;
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace mathmoe
