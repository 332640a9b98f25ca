#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "attnlab/tensor.hpp"

namespace attnlab {

// Which compatibility function scores a (query, key) token pair:
//   Original   Q(x) . K(y)^T     two independent affine projections
//   Symmetric  Q(x) . Q(y)^T     one shared projection
//   Pairwise   Q(x) . S . Q(y)^T shared projection plus a learned per-head
//                                d x d bilinear form S
enum class OperatorKind { Original, Symmetric, Pairwise };

const char* to_string(OperatorKind kind);
std::optional<OperatorKind> operator_kind_from_string(std::string_view name);

// Per-layer attention weights. Presence of w_k/b_k and s_heads encodes the
// operator: w_k only for Original, s_heads (n matrices of d x d) only for
// Pairwise. S carries no bias and is applied as a pure bilinear form.
struct AttentionParams {
  int hidden = 0;
  int n_heads = 0;
  OperatorKind kind = OperatorKind::Original;

  Tensor w_q, b_q;            // all kinds
  Tensor w_k, b_k;            // Original only
  std::vector<Tensor> s_heads;  // Pairwise only
  Tensor w_v, b_v;
  Tensor w_o, b_o;            // output projection, outside the Q/K/V count

  static AttentionParams init(int hidden, int n_heads, OperatorKind kind, Rng& rng,
                              double init_std = 0.02);

  int head_dim() const { return hidden / n_heads; }
  // Scalars actually allocated in {w_q, b_q, w_k, b_k, s_heads, w_v, b_v}.
  std::int64_t scoring_param_count() const;
};

// Closed-form Q/K/V parameter count for one attention layer:
//   Original  3(h^2 + h)
//   Symmetric 2(h^2 + h)
//   Pairwise  2(h^2 + h) + h^2/n
// Throws if n_heads does not divide hidden.
std::int64_t attention_param_count(int hidden, int n_heads, OperatorKind kind);

// Unscaled compatibility scores for every head and token pair,
// [B x L x h] -> [B x n x L x L]. Scaling by 1/sqrt(d) happens in
// attention_forward. Throws if kind disagrees with params.kind.
Tensor compat_scores(const Tensor& hidden_states, const AttentionParams& params,
                     OperatorKind kind);

// S = W_q . W_k^T, the pairwise-factor matrix obtained by collapsing the two
// d x d base-change matrices of a shared-projection attention head.
Tensor pairwise_from_factors(const Tensor& w_q_small, const Tensor& w_k_small);

// Post-softmax attention weights [B x n x L x L]: scores scaled by
// 1/sqrt(d), masked keys pushed to -1e9, softmax over the key axis.
// A fully masked sequence is an error.
Tensor attention_probs(const Tensor& hidden_states, const AttentionParams& params,
                       OperatorKind kind, const IntTensor& mask);

// Full multi-head attention: attention_probs, per-head value mixing,
// concatenated heads through the output projection. mask is [B x L] with
// 1 = attend, 0 = ignore.
Tensor attention_forward(const Tensor& hidden_states, const AttentionParams& params,
                         OperatorKind kind, const IntTensor& mask);

// ||A - A^T||_F / ||A||_F over the token-pair axes of a [B x n x L x L]
// score tensor. Zero for the symmetric operator by construction.
double asymmetry_ratio(const Tensor& scores);

}  // namespace attnlab
