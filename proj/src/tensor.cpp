#include "attnlab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace attnlab {

namespace detail {

struct TensorAccess {
  static const std::shared_ptr<TensorNode>& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_ran = false;  // set on the root after a reverse pass
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

namespace {
std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool g_grad_enabled = true;
}  // namespace

}  // namespace detail

using detail::TensorNode;

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("shape extent must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

IntTensor::IntTensor(Shape s, std::vector<int> d) : shape(std::move(s)), data(std::move(d)) {
  if (data.size() != shape_numel(shape)) {
    throw std::invalid_argument("IntTensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

IntTensor IntTensor::zeros(Shape s) {
  std::size_t n = shape_numel(s);
  return IntTensor(std::move(s), std::vector<int>(n, 0));
}

IntTensor IntTensor::full(Shape s, int value) {
  std::size_t n = shape_numel(s);
  return IntTensor(std::move(s), std::vector<int>(n, value));
}

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<TensorNode> new_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("Tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  node->seq = detail::g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

const TensorNode& deref(const std::shared_ptr<TensorNode>& node) {
  if (!node) throw std::runtime_error("Tensor: operation on an undefined tensor");
  return *node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return detail::TensorAccess::wrap(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return detail::TensorAccess::wrap(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  return detail::TensorAccess::wrap(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar_value(double v) { return from_data({}, {v}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = rng.uniform(lo, hi);
  return detail::TensorAccess::wrap(new_leaf(std::move(shape), std::move(values), requires_grad));
}

const Shape& Tensor::shape() const { return deref(node_).shape; }
int Tensor::dim(int i) const { return deref(node_).shape.at(static_cast<std::size_t>(i)); }
std::size_t Tensor::numel() const { return deref(node_).data.size(); }
bool Tensor::requires_grad() const { return deref(node_).requires_grad; }
bool Tensor::is_leaf() const { return deref(node_).is_leaf; }

std::span<const double> Tensor::values() const { return deref(node_).data; }

std::span<double> Tensor::values_mut() {
  deref(node_);
  return node_->data;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  const TensorNode& n = deref(node_);
  if (n.grad.empty()) throw std::runtime_error("Tensor: grad not populated; run backward first");
  return n.grad;
}

std::span<double> Tensor::grad_mut() {
  deref(node_);
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  deref(node_);
  node_->grad.clear();
  node_->backward_ran = false;
}

double Tensor::item() const {
  const TensorNode& n = deref(node_);
  if (n.data.size() != 1) {
    throw std::runtime_error("Tensor::item: tensor of shape " + shape_str(n.shape) + " is not scalar");
  }
  return n.data[0];
}

std::uint64_t Tensor::id() const { return deref(node_).seq; }

bool grad_enabled() { return detail::g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// OpGrad and make_op
// ---------------------------------------------------------------------------

std::size_t OpGrad::parent_count() const { return node_->parents.size(); }
std::span<const double> OpGrad::out_grad() const { return node_->grad; }
std::span<const double> OpGrad::out_values() const { return node_->data; }

std::span<const double> OpGrad::value(std::size_t parent) const {
  return node_->parents.at(parent)->data;
}

const Shape& OpGrad::parent_shape(std::size_t parent) const {
  return node_->parents.at(parent)->shape;
}

bool OpGrad::needs_grad(std::size_t parent) const {
  return node_->parents.at(parent)->requires_grad;
}

std::span<double> OpGrad::grad(std::size_t parent) {
  TensorNode& p = *node_->parents.at(parent);
  p.ensure_grad();
  return p.grad;
}

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               BackwardFn backward_fn) {
  auto node = new_leaf(std::move(shape), std::move(values), false);
  bool needs = false;
  for (const Tensor& p : parents) {
    const auto& pn = detail::TensorAccess::node(p);
    if (pn && pn->requires_grad) needs = true;
  }
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(detail::TensorAccess::node(p));
    node->backward_fn = std::move(backward_fn);
  }
  return detail::TensorAccess::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  const auto& root = detail::TensorAccess::node(loss);
  const TensorNode& check = deref(root);
  if (check.data.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(check.shape));
  }
  if (!check.requires_grad) {
    throw std::invalid_argument("backward: loss is detached; no recorded graph reaches it");
  }
  if (check.backward_ran) {
    throw std::runtime_error("backward: already ran for this loss; zero grads before running again");
  }

  // Reachable subgraph, then strict reverse creation order. Creation order is
  // topological by construction, so every node runs after all its consumers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

  // Fresh adjoints for interior nodes; leaves accumulate across passes.
  for (TensorNode* n : order) {
    if (n->is_leaf) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (TensorNode* n : order) {
    if (n->backward_fn) {
      OpGrad ctx(n);
      n->backward_fn(ctx);
    }
  }
  root->backward_ran = true;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](OpGrad& g) {
    const auto go = g.out_grad();
    for (std::size_t p = 0; p < 2; ++p) {
      if (!g.needs_grad(p)) continue;
      auto gp = g.grad(p);
      for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](OpGrad& g) {
    const auto go = g.out_grad();
    if (g.needs_grad(0)) {
      auto ga = g.grad(0);
      const auto bv2 = g.value(1);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
    }
    if (g.needs_grad(1)) {
      auto gb = g.grad(1);
      const auto av2 = g.value(0);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av2[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  return make_op(x.shape(), std::move(out), {x}, [s](OpGrad& g) {
    if (!g.needs_grad(0)) return;
    const auto go = g.out_grad();
    auto gx = g.grad(0);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.shape().empty() || bias.shape().size() != 1 || x.shape().back() != bias.dim(0)) {
    throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) +
                                " does not match last axis of " + shape_str(x.shape()));
  }
  const auto xv = x.values();
  const auto bv = bias.values();
  const std::size_t n = bv.size();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % n];
  return make_op(x.shape(), std::move(out), {x, bias}, [n](OpGrad& g) {
    const auto go = g.out_grad();
    if (g.needs_grad(0)) {
      auto gx = g.grad(0);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (g.needs_grad(1)) {
      auto gb = g.grad(1);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % n] += go[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  double total = 0.0;
  for (double v : xv) total += v;
  return make_op({}, {total}, {x}, [](OpGrad& g) {
    if (!g.needs_grad(0)) return;
    const double go = g.out_grad()[0];
    auto gx = g.grad(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace {

// rows x k times k x n, accumulating into out (ikj order, out pre-zeroed)
void gemm_nn(const double* a, const double* b, double* out, std::size_t rows, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// rows x k times (n x k)^T
void gemm_nt(const double* a, const double* b, double* out, std::size_t rows, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      orow[j] = acc;
    }
  }
}

// (rows x k)^T times rows x n -> k x n, accumulating into out
void gemm_tn_accum(const double* a, const double* b, double* out, std::size_t rows, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      double* orow = out + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

std::size_t leading_rows(const Shape& shape) {
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= static_cast<std::size_t>(shape[i]);
  return rows;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().empty() || b.shape().size() != 2 || a.shape().back() != b.dim(0)) {
    throw std::invalid_argument("matmul: inner extents disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const std::size_t rows = leading_rows(a.shape());
  const std::size_t k = static_cast<std::size_t>(a.shape().back());
  const std::size_t n = static_cast<std::size_t>(b.dim(1));
  std::vector<double> out(rows * n, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), rows, k, n);
  Shape out_shape = a.shape();
  out_shape.back() = static_cast<int>(n);
  return make_op(std::move(out_shape), std::move(out), {a, b}, [rows, k, n](OpGrad& g) {
    const double* go = g.out_grad().data();
    if (g.needs_grad(0)) {
      // dA += dOut . B^T
      std::vector<double> tmp(rows * k);
      gemm_nt(go, g.value(1).data(), tmp.data(), rows, n, k);
      auto ga = g.grad(0);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (g.needs_grad(1)) {
      // dB += A^T . dOut
      gemm_tn_accum(g.value(0).data(), go, g.grad(1).data(), rows, k, n);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.shape().empty() || b.shape().size() != 2 || a.shape().back() != b.dim(1)) {
    throw std::invalid_argument("matmul_nt: inner extents disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()) + " transposed");
  }
  const std::size_t rows = leading_rows(a.shape());
  const std::size_t k = static_cast<std::size_t>(a.shape().back());
  const std::size_t n = static_cast<std::size_t>(b.dim(0));
  std::vector<double> out(rows * n);
  gemm_nt(a.values().data(), b.values().data(), out.data(), rows, k, n);
  Shape out_shape = a.shape();
  out_shape.back() = static_cast<int>(n);
  return make_op(std::move(out_shape), std::move(out), {a, b}, [rows, k, n](OpGrad& g) {
    const double* go = g.out_grad().data();
    if (g.needs_grad(0)) {
      // dA += dOut . B   (dOut rows x n, B n x k)
      std::vector<double> tmp(rows * k, 0.0);
      gemm_nn(go, g.value(1).data(), tmp.data(), rows, n, k);
      auto ga = g.grad(0);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (g.needs_grad(1)) {
      // dB += dOut^T . A  (n x rows times rows x k)
      gemm_tn_accum(go, g.value(0).data(), g.grad(1).data(), rows, n, k);
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244008444;
constexpr double kInvSqrt2Pi = 0.3989422804014326779399461;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  return make_op(x.shape(), std::move(out), {x}, [](OpGrad& g) {
    if (!g.needs_grad(0)) return;
    const auto go = g.out_grad();
    const auto xv2 = g.value(0);
    auto gx = g.grad(0);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double v = xv2[i];
      const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double dens = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += go[i] * (phi + v * dens);
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  if (x.shape().empty()) {
    throw std::invalid_argument("softmax_rows: input must have at least one axis");
  }
  const std::size_t n = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      denom += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= denom;
  }
  return make_op(x.shape(), std::move(out), {x}, [rows, n](OpGrad& g) {
    if (!g.needs_grad(0)) return;
    const auto go = g.out_grad();
    const auto ov = g.out_values();
    auto gx = g.grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = ov.data() + r * n;
      const double* gr = go.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * gr[j];
      double* gxr = gx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gxr[j] += p[j] * (gr[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  if (x.shape().empty() || gamma.shape().size() != 1 || beta.shape().size() != 1 ||
      gamma.dim(0) != x.shape().back() || beta.dim(0) != x.shape().back()) {
    throw std::invalid_argument("layer_norm: gamma/beta must match last axis of " +
                                shape_str(x.shape()));
  }
  const std::size_t h = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.numel() / h;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_sigma(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += in[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = in[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = inv;
    double* xh = xhat.data() + r * h;
    double* o = out.data() + r * h;
    for (std::size_t j = 0; j < h; ++j) {
      xh[j] = (in[j] - mean) * inv;
      o[j] = gv[j] * xh[j] + bv[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [rows, h, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](OpGrad& g) {
                   const auto go = g.out_grad();
                   const auto gv2 = g.value(1);
                   if (g.needs_grad(1)) {
                     auto gg = g.grad(1);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* gr = go.data() + r * h;
                       const double* xh = xhat.data() + r * h;
                       for (std::size_t j = 0; j < h; ++j) gg[j] += gr[j] * xh[j];
                     }
                   }
                   if (g.needs_grad(2)) {
                     auto gb = g.grad(2);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* gr = go.data() + r * h;
                       for (std::size_t j = 0; j < h; ++j) gb[j] += gr[j];
                     }
                   }
                   if (g.needs_grad(0)) {
                     auto gx = g.grad(0);
                     const double inv_h = 1.0 / static_cast<double>(h);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* gr = go.data() + r * h;
                       const double* xh = xhat.data() + r * h;
                       double sum_d = 0.0, sum_dx = 0.0;
                       for (std::size_t j = 0; j < h; ++j) {
                         const double d = gr[j] * gv2[j];
                         sum_d += d;
                         sum_dx += d * xh[j];
                       }
                       double* gxr = gx.data() + r * h;
                       for (std::size_t j = 0; j < h; ++j) {
                         const double d = gr[j] * gv2[j];
                         gxr[j] += inv_sigma[r] * (d - inv_h * sum_d - xh[j] * inv_h * sum_dx);
                       }
                     }
                   }
                 });
}

Tensor embedding_rows(const Tensor& table, const IntTensor& ids) {
  if (table.shape().size() != 2) {
    throw std::invalid_argument("embedding_rows: table must be 2-D, got " + shape_str(table.shape()));
  }
  const int vocab = table.dim(0);
  const std::size_t h = static_cast<std::size_t>(table.dim(1));
  for (int id : ids.data) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding_rows: id " + std::to_string(id) +
                              " outside table of " + std::to_string(vocab) + " rows");
    }
  }
  const auto tv = table.values();
  std::vector<double> out(ids.numel() * h);
  for (std::size_t i = 0; i < ids.numel(); ++i) {
    std::memcpy(out.data() + i * h, tv.data() + static_cast<std::size_t>(ids.data[i]) * h,
                h * sizeof(double));
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(static_cast<int>(h));
  std::vector<int> id_copy = ids.data;
  return make_op(std::move(out_shape), std::move(out), {table},
                 [h, id_copy = std::move(id_copy)](OpGrad& g) {
                   if (!g.needs_grad(0)) return;
                   const auto go = g.out_grad();
                   auto gt = g.grad(0);
                   for (std::size_t i = 0; i < id_copy.size(); ++i) {
                     const double* src = go.data() + i * h;
                     double* dst = gt.data() + static_cast<std::size_t>(id_copy[i]) * h;
                     for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                   }
                 });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  const auto xv = x.values();
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](OpGrad& g) {
    if (!g.needs_grad(0)) return;
    const auto go = g.out_grad();
    auto gx = g.grad(0);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
  });
}

Tensor cross_entropy_masked(const Tensor& logits, const IntTensor& labels) {
  if (logits.shape().size() < 2) {
    throw std::invalid_argument("cross_entropy_masked: logits must be at least 2-D, got " +
                                shape_str(logits.shape()));
  }
  const std::size_t vocab = static_cast<std::size_t>(logits.shape().back());
  const std::size_t positions = logits.numel() / vocab;
  if (labels.numel() != positions) {
    throw std::invalid_argument("cross_entropy_masked: labels " + shape_str(labels.shape) +
                                " do not match logit positions of " + shape_str(logits.shape()));
  }
  for (int lbl : labels.data) {
    if (lbl != -1 && (lbl < 0 || lbl >= static_cast<int>(vocab))) {
      throw std::out_of_range("cross_entropy_masked: label " + std::to_string(lbl) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const auto lv = logits.values();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t pos = 0; pos < positions; ++pos) {
    const int lbl = labels.data[pos];
    if (lbl == -1) continue;
    const double* row = lv.data() + pos * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
    total += std::log(denom) + mx - row[static_cast<std::size_t>(lbl)];
    ++count;
  }
  if (count == 0) {
    throw std::runtime_error("cross_entropy_masked: every label is ignored; loss is undefined");
  }
  const double mean = total / static_cast<double>(count);
  std::vector<int> label_copy = labels.data;
  return make_op({}, {mean}, {logits},
                 [vocab, positions, count, label_copy = std::move(label_copy)](OpGrad& g) {
                   if (!g.needs_grad(0)) return;
                   const double go = g.out_grad()[0];
                   const auto lv2 = g.value(0);
                   auto gl = g.grad(0);
                   const double inv_count = 1.0 / static_cast<double>(count);
                   for (std::size_t pos = 0; pos < positions; ++pos) {
                     const int lbl = label_copy[pos];
                     if (lbl == -1) continue;
                     const double* row = lv2.data() + pos * vocab;
                     double* grow = gl.data() + pos * vocab;
                     double mx = row[0];
                     for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
                     double denom = 0.0;
                     for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
                     for (std::size_t j = 0; j < vocab; ++j) {
                       const double p = std::exp(row[j] - mx) / denom;
                       const double target = (static_cast<int>(j) == lbl) ? 1.0 : 0.0;
                       grow[j] += go * inv_count * (p - target);
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_grad: step must be positive");
  NoGradGuard guard;
  std::vector<double> base(x.values().begin(), x.values().end());
  std::vector<double> result(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> bumped = base;
    bumped[i] = base[i] + step;
    const double up = f(Tensor::from_data(x.shape(), bumped));
    bumped[i] = base[i] - step;
    const double down = f(Tensor::from_data(x.shape(), std::move(bumped)));
    result[i] = (up - down) / (2.0 * step);
  }
  return Tensor::from_data(x.shape(), std::move(result));
}

}  // namespace attnlab
