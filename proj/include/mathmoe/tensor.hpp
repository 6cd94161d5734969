#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mathmoe/errors.hpp"
#include "mathmoe/rng.hpp"

namespace mathmoe {

struct TensorImpl;

/// Dense row-major tensor of 64-bit reals with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a shared node. Values are immutable after
/// creation except for gradient accumulation; mutable_data() exists for
/// optimizer updates on leaf parameters and must not be called on tensors
/// that participate in a live graph. A graph is confined to one execution
/// context; independent graphs on disjoint data may run in parallel.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape, std::vector<double> data,
         bool requires_grad = false);

  static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::int64_t> shape, double value,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(std::vector<std::int64_t> shape, Rng& rng,
                      double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::int64_t>& shape() const;
  std::int64_t size() const;
  std::int64_t dim(int i) const;
  int rank() const;

  double value() const;  // scalar tensors only
  double at(std::span<const std::int64_t> index) const;
  std::span<const double> values() const;
  std::vector<double>& mutable_data();

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode backprop from a scalar root.
  void backward() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // sized on first accumulation
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Receives this node's accumulated gradient, pushes into parents' grads.
  std::function<void(const std::vector<double>&)> backward_fn;
};

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);

// x: m*n plus a length-n row vector / length-m per-row scalar.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_colvec(const Tensor& x, const Tensor& v);

// ---- linear algebra (2-D) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// ---- reductions / normalization ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor logsumexp(const Tensor& x, int axis = -1);  // reduces the axis away
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- losses ----
// Mean negative log-likelihood over positions whose target != ignore_index.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::int64_t ignore_index = -1);
// Mean over elements of the stable binary cross entropy with logits.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

// ---- indexing / structure ----
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> rows);
// Places row i of x at row rows[i] of an otherwise-zero (total_rows, cols)
// result; gradient gathers back. Rows must be distinct.
Tensor scatter_rows(const Tensor& x, std::span<const std::int64_t> rows,
                    std::int64_t total_rows);
// Per-row element pick from a 2-D tensor: out[i] = x[i, cols[i]].
Tensor take(const Tensor& x, std::span<const std::int64_t> cols);
Tensor mask_fill(const Tensor& x, const std::vector<bool>& mask, double value);
Tensor dropout(const Tensor& x, double rate, Rng& rng);
Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape);

std::vector<std::int64_t> argmax(const Tensor& x, int axis = -1);

bool all_finite(std::span<const double> v);

/// Compares the reverse-mode gradient of a scalar-valued computation against
/// central finite differences. Returns the max relative error over all input
/// elements. f must be a pure function of its inputs. Throws NumericError on
/// a non-finite analytic gradient.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double step = 1e-5);

}  // namespace mathmoe
