#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "attnlab/rng.hpp"

namespace attnlab {

// Extents of a dense row-major array. Empty shape denotes a scalar.
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Integer-valued companion tensor for token ids, labels and masks.
// Not differentiable; -1 is the MLM ignore marker.
struct IntTensor {
  Shape shape;
  std::vector<int> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<int> d);
  static IntTensor zeros(Shape s);
  static IntTensor full(Shape s, int value);
  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
};

namespace detail {
struct TensorNode;
struct TensorAccess;
}

// Dense double-precision tensor with reverse-mode autodiff. A Tensor is a
// cheap handle onto a shared node; the node records the op parents and a
// backward closure, forming the compute graph in creation order.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar_value(double v);
  // i.i.d. uniform entries in [lo, hi)
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  std::size_t numel() const;
  bool requires_grad() const;
  bool is_leaf() const;

  std::span<const double> values() const;
  // Direct mutation of leaf storage (initialization, optimizer updates,
  // finite-difference probing). Mutating a non-leaf invalidates the graph.
  std::span<double> values_mut();

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  double item() const;  // scalar tensors only

  std::uint64_t id() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend struct detail::TensorAccess;

  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}

  std::shared_ptr<detail::TensorNode> node_;
};

// Thread-local switch; ops record backward closures only while enabled.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// View handed to backward closures: read the output adjoint and values,
// accumulate into parent adjoints.
class OpGrad {
 public:
  explicit OpGrad(detail::TensorNode* node) : node_(node) {}

  std::size_t parent_count() const;
  std::span<const double> out_grad() const;
  std::span<const double> out_values() const;
  std::span<const double> value(std::size_t parent) const;
  const Shape& parent_shape(std::size_t parent) const;
  bool needs_grad(std::size_t parent) const;
  // Zero-initialized accumulator; backward closures must += into it.
  std::span<double> grad(std::size_t parent);

 private:
  detail::TensorNode* node_;
};

using BackwardFn = std::function<void(OpGrad&)>;

// Records a new graph node. Modules use this to define their own
// differentiable ops; every built-in op below goes through it too.
Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> parents, BackwardFn backward);

// ---------------------------------------------------------------------------
// Forward ops (all record adjoint closures when grad is enabled)
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);               // same shape
Tensor mul(const Tensor& a, const Tensor& b);               // elementwise
Tensor scale(const Tensor& x, double s);
Tensor add_bias(const Tensor& x, const Tensor& bias);       // broadcast last axis

// [... x k] @ [k x n] -> [... x n]; leading axes of a are flattened rows.
Tensor matmul(const Tensor& a, const Tensor& b);
// [... x k] @ [n x k]^T -> [... x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);                                // scalar
Tensor gelu(const Tensor& x);                               // exact erf form
Tensor softmax_rows(const Tensor& x);                       // last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);
// table[V x h], ids [...] -> [... x h]; throws on out-of-range ids
Tensor embedding_rows(const Tensor& table, const IntTensor& ids);
// Inverted dropout; identity when p == 0. Mask drawn from rng.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// logits [B x L x V], labels [B x L] with -1 = ignore. Mean negative
// log-likelihood over non-ignored positions; throws if all are ignored.
Tensor cross_entropy_masked(const Tensor& logits, const IntTensor& labels);

// Reverse pass from a scalar loss. Populates grad on every reachable tensor
// that requires grad, visiting nodes in reverse creation order. Calling it
// twice on the same loss without zeroing grads is an error.
void backward(const Tensor& loss);

// Central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Runs with grad recording disabled; the independent oracle for backward().
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double step);

}  // namespace attnlab
