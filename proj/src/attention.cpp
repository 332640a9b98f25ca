#include "attnlab/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace attnlab {

const char* to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::Original: return "original";
    case OperatorKind::Symmetric: return "symmetric";
    case OperatorKind::Pairwise: return "pairwise";
  }
  return "unknown";
}

std::optional<OperatorKind> operator_kind_from_string(std::string_view name) {
  if (name == "original") return OperatorKind::Original;
  if (name == "symmetric") return OperatorKind::Symmetric;
  if (name == "pairwise") return OperatorKind::Pairwise;
  return std::nullopt;
}

std::int64_t attention_param_count(int hidden, int n_heads, OperatorKind kind) {
  if (hidden <= 0 || n_heads <= 0 || hidden % n_heads != 0) {
    throw std::invalid_argument("attention_param_count: heads " + std::to_string(n_heads) +
                                " must divide hidden " + std::to_string(hidden));
  }
  const std::int64_t h = hidden;
  const std::int64_t affine = h * h + h;
  switch (kind) {
    case OperatorKind::Original: return 3 * affine;
    case OperatorKind::Symmetric: return 2 * affine;
    case OperatorKind::Pairwise: return 2 * affine + (h * h) / n_heads;
  }
  throw std::invalid_argument("attention_param_count: unknown operator kind");
}

AttentionParams AttentionParams::init(int hidden, int n_heads, OperatorKind kind, Rng& rng,
                                      double init_std) {
  if (hidden <= 0 || n_heads <= 0 || hidden % n_heads != 0) {
    throw std::invalid_argument("AttentionParams: heads " + std::to_string(n_heads) +
                                " must divide hidden " + std::to_string(hidden));
  }
  auto weight = [&](Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values_mut()) v = rng.truncated_normal(init_std, 2.0);
    return t;
  };
  AttentionParams p;
  p.hidden = hidden;
  p.n_heads = n_heads;
  p.kind = kind;
  p.w_q = weight({hidden, hidden});
  p.b_q = Tensor::zeros({hidden}, true);
  if (kind == OperatorKind::Original) {
    p.w_k = weight({hidden, hidden});
    p.b_k = Tensor::zeros({hidden}, true);
  }
  if (kind == OperatorKind::Pairwise) {
    const int d = hidden / n_heads;
    p.s_heads.reserve(static_cast<std::size_t>(n_heads));
    for (int i = 0; i < n_heads; ++i) p.s_heads.push_back(weight({d, d}));
  }
  p.w_v = weight({hidden, hidden});
  p.b_v = Tensor::zeros({hidden}, true);
  p.w_o = weight({hidden, hidden});
  p.b_o = Tensor::zeros({hidden}, true);
  return p;
}

std::int64_t AttentionParams::scoring_param_count() const {
  std::int64_t total = static_cast<std::int64_t>(w_q.numel()) + static_cast<std::int64_t>(b_q.numel());
  if (w_k.defined()) total += static_cast<std::int64_t>(w_k.numel()) + static_cast<std::int64_t>(b_k.numel());
  for (const Tensor& s : s_heads) total += static_cast<std::int64_t>(s.numel());
  total += static_cast<std::int64_t>(w_v.numel()) + static_cast<std::int64_t>(b_v.numel());
  return total;
}

// ---------------------------------------------------------------------------
// Fused per-head kernels
// ---------------------------------------------------------------------------

namespace {

struct BatchDims {
  std::size_t batch, seq, hidden, heads, head_dim;
};

BatchDims dims_of(const Tensor& projected, int n_heads) {
  const Shape& s = projected.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("attention: expected [B x L x h] activations, got " + shape_str(s));
  }
  if (s[2] % n_heads != 0) {
    throw std::invalid_argument("attention: heads " + std::to_string(n_heads) +
                                " must divide hidden " + std::to_string(s[2]));
  }
  BatchDims d;
  d.batch = static_cast<std::size_t>(s[0]);
  d.seq = static_cast<std::size_t>(s[1]);
  d.hidden = static_cast<std::size_t>(s[2]);
  d.heads = static_cast<std::size_t>(n_heads);
  d.head_dim = d.hidden / d.heads;
  return d;
}

// scores[b,i,s,t] = sum_c q[b,s,i*d+c] * k[b,t,i*d+c]
Tensor head_scores(const Tensor& q, const Tensor& k, int n_heads) {
  const BatchDims dm = dims_of(q, n_heads);
  if (k.shape() != q.shape()) {
    throw std::invalid_argument("attention: query/key shape mismatch " + shape_str(q.shape()) +
                                " vs " + shape_str(k.shape()));
  }
  const auto qv = q.values();
  const auto kv = k.values();
  std::vector<double> out(dm.batch * dm.heads * dm.seq * dm.seq);
  for (std::size_t b = 0; b < dm.batch; ++b) {
    for (std::size_t i = 0; i < dm.heads; ++i) {
      const std::size_t off = i * dm.head_dim;
      double* slab = out.data() + (b * dm.heads + i) * dm.seq * dm.seq;
      for (std::size_t s = 0; s < dm.seq; ++s) {
        const double* qrow = qv.data() + (b * dm.seq + s) * dm.hidden + off;
        for (std::size_t t = 0; t < dm.seq; ++t) {
          const double* krow = kv.data() + (b * dm.seq + t) * dm.hidden + off;
          double acc = 0.0;
          for (std::size_t c = 0; c < dm.head_dim; ++c) acc += qrow[c] * krow[c];
          slab[s * dm.seq + t] = acc;
        }
      }
    }
  }
  Shape out_shape{static_cast<int>(dm.batch), n_heads, static_cast<int>(dm.seq),
                  static_cast<int>(dm.seq)};
  return make_op(std::move(out_shape), std::move(out), {q, k}, [dm](OpGrad& g) {
    const auto go = g.out_grad();
    const auto qv2 = g.value(0);
    const auto kv2 = g.value(1);
    for (std::size_t b = 0; b < dm.batch; ++b) {
      for (std::size_t i = 0; i < dm.heads; ++i) {
        const std::size_t off = i * dm.head_dim;
        const double* slab = go.data() + (b * dm.heads + i) * dm.seq * dm.seq;
        if (g.needs_grad(0)) {
          auto gq = g.grad(0);
          for (std::size_t s = 0; s < dm.seq; ++s) {
            double* grow = gq.data() + (b * dm.seq + s) * dm.hidden + off;
            for (std::size_t t = 0; t < dm.seq; ++t) {
              const double w = slab[s * dm.seq + t];
              if (w == 0.0) continue;
              const double* krow = kv2.data() + (b * dm.seq + t) * dm.hidden + off;
              for (std::size_t c = 0; c < dm.head_dim; ++c) grow[c] += w * krow[c];
            }
          }
        }
        if (g.needs_grad(1)) {
          auto gk = g.grad(1);
          for (std::size_t t = 0; t < dm.seq; ++t) {
            double* grow = gk.data() + (b * dm.seq + t) * dm.hidden + off;
            for (std::size_t s = 0; s < dm.seq; ++s) {
              const double w = slab[s * dm.seq + t];
              if (w == 0.0) continue;
              const double* qrow = qv2.data() + (b * dm.seq + s) * dm.hidden + off;
              for (std::size_t c = 0; c < dm.head_dim; ++c) grow[c] += w * qrow[c];
            }
          }
        }
      }
    }
  });
}

// scores[b,i,s,t] = q[b,s,head i] . S_i . q[b,t,head i]
// Parents: q (used for both sides), then one S per head.
Tensor head_bilinear(const Tensor& q, const std::vector<Tensor>& s_heads, int n_heads) {
  const BatchDims dm = dims_of(q, n_heads);
  if (s_heads.size() != dm.heads) {
    throw std::invalid_argument("attention: expected " + std::to_string(n_heads) +
                                " pairwise-factor matrices, got " + std::to_string(s_heads.size()));
  }
  const int d = static_cast<int>(dm.head_dim);
  for (const Tensor& s : s_heads) {
    if (s.shape() != Shape{d, d}) {
      throw std::invalid_argument("attention: pairwise factors must be " + shape_str({d, d}) +
                                  ", got " + shape_str(s.shape()));
    }
  }
  const auto qv = q.values();
  std::vector<double> out(dm.batch * dm.heads * dm.seq * dm.seq);
  std::vector<double> sq(dm.seq * dm.head_dim);  // S_i . q_t per (b, i)
  for (std::size_t b = 0; b < dm.batch; ++b) {
    for (std::size_t i = 0; i < dm.heads; ++i) {
      const std::size_t off = i * dm.head_dim;
      const auto sv = s_heads[i].values();
      for (std::size_t t = 0; t < dm.seq; ++t) {
        const double* qrow = qv.data() + (b * dm.seq + t) * dm.hidden + off;
        double* dst = sq.data() + t * dm.head_dim;
        for (std::size_t c = 0; c < dm.head_dim; ++c) {
          const double* srow = sv.data() + c * dm.head_dim;
          double acc = 0.0;
          for (std::size_t e = 0; e < dm.head_dim; ++e) acc += srow[e] * qrow[e];
          dst[c] = acc;
        }
      }
      double* slab = out.data() + (b * dm.heads + i) * dm.seq * dm.seq;
      for (std::size_t s = 0; s < dm.seq; ++s) {
        const double* qrow = qv.data() + (b * dm.seq + s) * dm.hidden + off;
        for (std::size_t t = 0; t < dm.seq; ++t) {
          const double* w = sq.data() + t * dm.head_dim;
          double acc = 0.0;
          for (std::size_t c = 0; c < dm.head_dim; ++c) acc += qrow[c] * w[c];
          slab[s * dm.seq + t] = acc;
        }
      }
    }
  }
  std::vector<Tensor> parents{q};
  for (const Tensor& s : s_heads) parents.push_back(s);
  Shape out_shape{static_cast<int>(dm.batch), n_heads, static_cast<int>(dm.seq),
                  static_cast<int>(dm.seq)};
  return make_op(std::move(out_shape), std::move(out), std::move(parents), [dm](OpGrad& g) {
    const auto go = g.out_grad();
    const auto qv2 = g.value(0);
    std::vector<double> sq(dm.seq * dm.head_dim);   // S_i . q_t
    std::vector<double> qs(dm.seq * dm.head_dim);   // q_s^T . S_i
    for (std::size_t b = 0; b < dm.batch; ++b) {
      for (std::size_t i = 0; i < dm.heads; ++i) {
        const std::size_t off = i * dm.head_dim;
        const auto sv = g.value(1 + i);
        for (std::size_t t = 0; t < dm.seq; ++t) {
          const double* qrow = qv2.data() + (b * dm.seq + t) * dm.hidden + off;
          double* fwd = sq.data() + t * dm.head_dim;
          double* bwd = qs.data() + t * dm.head_dim;
          for (std::size_t c = 0; c < dm.head_dim; ++c) {
            const double* srow = sv.data() + c * dm.head_dim;
            double acc = 0.0;
            for (std::size_t e = 0; e < dm.head_dim; ++e) acc += srow[e] * qrow[e];
            fwd[c] = acc;
          }
          for (std::size_t e = 0; e < dm.head_dim; ++e) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dm.head_dim; ++c) acc += qrow[c] * sv[c * dm.head_dim + e];
            bwd[e] = acc;
          }
        }
        const double* slab = go.data() + (b * dm.heads + i) * dm.seq * dm.seq;
        if (g.needs_grad(0)) {
          auto gq = g.grad(0);
          for (std::size_t s = 0; s < dm.seq; ++s) {
            double* grow = gq.data() + (b * dm.seq + s) * dm.hidden + off;
            const double* w = slab + s * dm.seq;
            // left argument: dq_s += sum_t w[t] (S . q_t)
            for (std::size_t t = 0; t < dm.seq; ++t) {
              if (w[t] == 0.0) continue;
              const double* fwd = sq.data() + t * dm.head_dim;
              for (std::size_t c = 0; c < dm.head_dim; ++c) grow[c] += w[t] * fwd[c];
            }
          }
          // right argument: dq_t += sum_s w[s,t] (q_s^T . S)
          for (std::size_t t = 0; t < dm.seq; ++t) {
            double* grow = gq.data() + (b * dm.seq + t) * dm.hidden + off;
            for (std::size_t s = 0; s < dm.seq; ++s) {
              const double w = slab[s * dm.seq + t];
              if (w == 0.0) continue;
              const double* bwd = qs.data() + s * dm.head_dim;
              for (std::size_t c = 0; c < dm.head_dim; ++c) grow[c] += w * bwd[c];
            }
          }
        }
        if (g.needs_grad(1 + i)) {
          auto gs = g.grad(1 + i);
          // dS[c,e] += sum_{s,t} w[s,t] q_s[c] q_t[e]
          for (std::size_t s = 0; s < dm.seq; ++s) {
            const double* qrow_s = qv2.data() + (b * dm.seq + s) * dm.hidden + off;
            const double* w = slab + s * dm.seq;
            for (std::size_t t = 0; t < dm.seq; ++t) {
              if (w[t] == 0.0) continue;
              const double* qrow_t = qv2.data() + (b * dm.seq + t) * dm.hidden + off;
              for (std::size_t c = 0; c < dm.head_dim; ++c) {
                double* grow = gs.data() + c * dm.head_dim;
                const double wq = w[t] * qrow_s[c];
                for (std::size_t e = 0; e < dm.head_dim; ++e) grow[e] += wq * qrow_t[e];
              }
            }
          }
        }
      }
    }
  });
}

// ctx[b,s,i*d+c] = sum_t probs[b,i,s,t] * v[b,t,i*d+c]
Tensor attn_combine(const Tensor& probs, const Tensor& v, int n_heads) {
  const BatchDims dm = dims_of(v, n_heads);
  const Shape expected{static_cast<int>(dm.batch), n_heads, static_cast<int>(dm.seq),
                       static_cast<int>(dm.seq)};
  if (probs.shape() != expected) {
    throw std::invalid_argument("attention: probs " + shape_str(probs.shape()) +
                                " do not match " + shape_str(expected));
  }
  const auto pv = probs.values();
  const auto vv = v.values();
  std::vector<double> out(dm.batch * dm.seq * dm.hidden, 0.0);
  for (std::size_t b = 0; b < dm.batch; ++b) {
    for (std::size_t i = 0; i < dm.heads; ++i) {
      const std::size_t off = i * dm.head_dim;
      const double* slab = pv.data() + (b * dm.heads + i) * dm.seq * dm.seq;
      for (std::size_t s = 0; s < dm.seq; ++s) {
        double* orow = out.data() + (b * dm.seq + s) * dm.hidden + off;
        for (std::size_t t = 0; t < dm.seq; ++t) {
          const double w = slab[s * dm.seq + t];
          if (w == 0.0) continue;
          const double* vrow = vv.data() + (b * dm.seq + t) * dm.hidden + off;
          for (std::size_t c = 0; c < dm.head_dim; ++c) orow[c] += w * vrow[c];
        }
      }
    }
  }
  Shape out_shape = v.shape();
  return make_op(std::move(out_shape), std::move(out), {probs, v}, [dm](OpGrad& g) {
    const auto go = g.out_grad();
    const auto pv2 = g.value(0);
    const auto vv2 = g.value(1);
    for (std::size_t b = 0; b < dm.batch; ++b) {
      for (std::size_t i = 0; i < dm.heads; ++i) {
        const std::size_t off = i * dm.head_dim;
        if (g.needs_grad(0)) {
          auto gp = g.grad(0);
          double* slab = gp.data() + (b * dm.heads + i) * dm.seq * dm.seq;
          for (std::size_t s = 0; s < dm.seq; ++s) {
            const double* grow = go.data() + (b * dm.seq + s) * dm.hidden + off;
            for (std::size_t t = 0; t < dm.seq; ++t) {
              const double* vrow = vv2.data() + (b * dm.seq + t) * dm.hidden + off;
              double acc = 0.0;
              for (std::size_t c = 0; c < dm.head_dim; ++c) acc += grow[c] * vrow[c];
              slab[s * dm.seq + t] += acc;
            }
          }
        }
        if (g.needs_grad(1)) {
          auto gv = g.grad(1);
          const double* slab = pv2.data() + (b * dm.heads + i) * dm.seq * dm.seq;
          for (std::size_t t = 0; t < dm.seq; ++t) {
            double* grow = gv.data() + (b * dm.seq + t) * dm.hidden + off;
            for (std::size_t s = 0; s < dm.seq; ++s) {
              const double w = slab[s * dm.seq + t];
              if (w == 0.0) continue;
              const double* orow = go.data() + (b * dm.seq + s) * dm.hidden + off;
              for (std::size_t c = 0; c < dm.head_dim; ++c) grow[c] += w * orow[c];
            }
          }
        }
      }
    }
  });
}

constexpr double kMaskFill = -1e9;

// Adds -1e9 to every score column whose key token is masked out.
Tensor mask_add_keys(const Tensor& scores, const IntTensor& mask) {
  const Shape& s = scores.shape();
  if (s.size() != 4) {
    throw std::invalid_argument("attention: scores must be [B x n x L x L], got " + shape_str(s));
  }
  if (mask.shape != Shape{s[0], s[3]}) {
    throw std::invalid_argument("attention: mask " + shape_str(mask.shape) +
                                " does not match scores " + shape_str(s));
  }
  for (int m : mask.data) {
    if (m != 0 && m != 1) throw std::invalid_argument("attention: mask entries must be 0 or 1");
  }
  const std::size_t batch = static_cast<std::size_t>(s[0]);
  const std::size_t seq = static_cast<std::size_t>(s[3]);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < seq; ++t) any |= mask.data[b * seq + t] == 1;
    if (!any) {
      throw std::runtime_error("attention: sequence " + std::to_string(b) +
                               " is fully masked; softmax is undefined");
    }
  }
  const std::size_t slabs = static_cast<std::size_t>(s[1]) * static_cast<std::size_t>(s[2]);
  const auto sv = scores.values();
  std::vector<double> out(sv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const int* mrow = mask.data.data() + b * seq;
    const double* src = sv.data() + b * slabs * seq;
    double* dst = out.data() + b * slabs * seq;
    for (std::size_t r = 0; r < slabs; ++r) {
      for (std::size_t t = 0; t < seq; ++t) {
        dst[r * seq + t] = src[r * seq + t] + (mrow[t] ? 0.0 : kMaskFill);
      }
    }
  }
  return make_op(scores.shape(), std::move(out), {scores}, [](OpGrad& g) {
    if (!g.needs_grad(0)) return;
    const auto go = g.out_grad();
    auto gs = g.grad(0);
    for (std::size_t i = 0; i < go.size(); ++i) gs[i] += go[i];
  });
}

void check_kind(const AttentionParams& params, OperatorKind kind) {
  if (params.kind != kind) {
    throw std::invalid_argument(std::string("attention: params built for operator '") +
                                to_string(params.kind) + "' used with '" + to_string(kind) + "'");
  }
}

Tensor project(const Tensor& hidden_states, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(hidden_states, w), b);
}

}  // namespace

// ---------------------------------------------------------------------------
// Public surface
// ---------------------------------------------------------------------------

Tensor compat_scores(const Tensor& hidden_states, const AttentionParams& params,
                     OperatorKind kind) {
  check_kind(params, kind);
  dims_of(hidden_states, params.n_heads);
  Tensor q = project(hidden_states, params.w_q, params.b_q);
  switch (kind) {
    case OperatorKind::Original: {
      Tensor k = project(hidden_states, params.w_k, params.b_k);
      return head_scores(q, k, params.n_heads);
    }
    case OperatorKind::Symmetric:
      return head_scores(q, q, params.n_heads);
    case OperatorKind::Pairwise:
      return head_bilinear(q, params.s_heads, params.n_heads);
  }
  throw std::invalid_argument("compat_scores: unknown operator kind");
}

Tensor pairwise_from_factors(const Tensor& w_q_small, const Tensor& w_k_small) {
  const Shape& a = w_q_small.shape();
  const Shape& b = w_k_small.shape();
  if (a.size() != 2 || a[0] != a[1] || a != b) {
    throw std::invalid_argument("pairwise_from_factors: expected matching square matrices, got " +
                                shape_str(a) + " and " + shape_str(b));
  }
  return matmul_nt(w_q_small, w_k_small);
}

Tensor attention_probs(const Tensor& hidden_states, const AttentionParams& params,
                       OperatorKind kind, const IntTensor& mask) {
  check_kind(params, kind);
  const BatchDims dm = dims_of(hidden_states, params.n_heads);
  Tensor raw = compat_scores(hidden_states, params, kind);
  Tensor scaled = scale(raw, 1.0 / std::sqrt(static_cast<double>(dm.head_dim)));
  return softmax_rows(mask_add_keys(scaled, mask));
}

Tensor attention_forward(const Tensor& hidden_states, const AttentionParams& params,
                         OperatorKind kind, const IntTensor& mask) {
  Tensor probs = attention_probs(hidden_states, params, kind, mask);
  Tensor v = project(hidden_states, params.w_v, params.b_v);
  Tensor ctx = attn_combine(probs, v, params.n_heads);
  return project(ctx, params.w_o, params.b_o);
}

double asymmetry_ratio(const Tensor& scores) {
  const Shape& s = scores.shape();
  if (s.size() != 4 || s[2] != s[3]) {
    throw std::invalid_argument("asymmetry_ratio: expected [B x n x L x L] scores, got " +
                                shape_str(s));
  }
  const std::size_t slabs = static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]);
  const std::size_t seq = static_cast<std::size_t>(s[2]);
  const auto sv = scores.values();
  double diff_sq = 0.0;
  double norm_sq = 0.0;
  for (std::size_t g = 0; g < slabs; ++g) {
    const double* slab = sv.data() + g * seq * seq;
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < seq; ++j) {
        const double a = slab[i * seq + j];
        const double d = a - slab[j * seq + i];
        diff_sq += d * d;
        norm_sq += a * a;
      }
    }
  }
  if (norm_sq == 0.0) return 0.0;
  return std::sqrt(diff_sq) / std::sqrt(norm_sq);
}

}  // namespace attnlab
