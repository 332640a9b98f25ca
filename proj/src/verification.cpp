#include "attnlab/verification.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "attnlab/attention.hpp"

namespace attnlab {

namespace {

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

CheckResult bounded(std::string name, double worst, double bound, std::string detail = {}) {
  CheckResult r;
  r.name = std::move(name);
  r.worst = worst;
  r.bound = bound;
  r.pass = worst <= bound;
  r.detail = std::move(detail);
  return r;
}

}  // namespace

std::string savings_percent(std::int64_t variant, std::int64_t original) {
  const double pct = 100.0 * (1.0 - static_cast<double>(variant) / static_cast<double>(original));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", pct);
  return buf;
}

// ---------------------------------------------------------------------------
// Algebra
// ---------------------------------------------------------------------------

std::vector<CheckResult> verify_algebra(std::uint64_t seed, int trials) {
  Rng rng(mix_seed(seed, 0x616c67));
  const int hidden = 8, heads = 2, seq = 5;
  const int d = hidden / heads;

  double sym_worst = 0.0, reduce_worst = 0.0, tied_worst = 0.0, factor_worst = 0.0;
  double row_worst = 0.0, masked_worst = 0.0;
  double asym_sample = 0.0;

  for (int trial = 0; trial < trials; ++trial) {
    Tensor h = Tensor::uniform({1, seq, hidden}, rng, -2.0, 2.0);

    // transpose invariance of the symmetric operator
    AttentionParams sym = AttentionParams::init(hidden, heads, OperatorKind::Symmetric, rng, 0.2);
    Tensor s_scores = compat_scores(h, sym, OperatorKind::Symmetric);
    for (int g = 0; g < heads; ++g) {
      for (int a = 0; a < seq; ++a) {
        for (int b = 0; b < seq; ++b) {
          sym_worst = std::max(
              sym_worst, std::fabs(s_scores.values()[(static_cast<std::size_t>(g) * seq + a) * seq + b] -
                                   s_scores.values()[(static_cast<std::size_t>(g) * seq + b) * seq + a]));
        }
      }
    }

    // pairwise with identity factors reduces to the symmetric operator
    AttentionParams pair;
    pair.hidden = hidden;
    pair.n_heads = heads;
    pair.kind = OperatorKind::Pairwise;
    pair.w_q = sym.w_q;
    pair.b_q = sym.b_q;
    pair.w_v = sym.w_v;
    pair.b_v = sym.b_v;
    pair.w_o = sym.w_o;
    pair.b_o = sym.b_o;
    for (int i = 0; i < heads; ++i) {
      Tensor eye = Tensor::zeros({d, d}, true);
      for (int c = 0; c < d; ++c) eye.values_mut()[static_cast<std::size_t>(c) * d + c] = 1.0;
      pair.s_heads.push_back(eye);
    }
    reduce_worst = std::max(
        reduce_worst,
        max_abs_diff(compat_scores(h, pair, OperatorKind::Pairwise).values(), s_scores.values()));

    // original with tied K = Q reduces to the symmetric operator
    AttentionParams tied = AttentionParams::init(hidden, heads, OperatorKind::Original, rng, 0.2);
    std::copy(sym.w_q.values().begin(), sym.w_q.values().end(), tied.w_q.values_mut().begin());
    std::copy(sym.w_q.values().begin(), sym.w_q.values().end(), tied.w_k.values_mut().begin());
    std::copy(sym.b_q.values().begin(), sym.b_q.values().end(), tied.b_q.values_mut().begin());
    std::copy(sym.b_q.values().begin(), sym.b_q.values().end(), tied.b_k.values_mut().begin());
    tied_worst = std::max(
        tied_worst,
        max_abs_diff(compat_scores(h, tied, OperatorKind::Original).values(), s_scores.values()));

    // base-change factorization: (L(x) Wq).(L(y) Wk)^T == L(x).S.L(y)^T
    Tensor shared = Tensor::uniform({hidden, d}, rng, -1.0, 1.0);
    Tensor wq = Tensor::uniform({d, d}, rng, -1.0, 1.0);
    Tensor wk = Tensor::uniform({d, d}, rng, -1.0, 1.0);
    Tensor x = Tensor::uniform({1, hidden}, rng, -1.0, 1.0);
    Tensor y = Tensor::uniform({1, hidden}, rng, -1.0, 1.0);
    Tensor s = pairwise_from_factors(wq, wk);
    Tensor lx = matmul(x, shared);
    Tensor ly = matmul(y, shared);
    const double composed = matmul_nt(matmul(lx, wq), matmul(ly, wk)).values()[0];
    const double bilinear = matmul_nt(matmul(lx, s), ly).values()[0];
    factor_worst = std::max(factor_worst, std::fabs(composed - bilinear));

    // attention rows are stochastic over unmasked keys; masked keys vanish
    IntTensor mask = IntTensor::full({1, seq}, 1);
    mask.data[static_cast<std::size_t>(trial % seq)] = 0;
    bool all_masked = true;
    for (int v : mask.data) all_masked &= v == 0;
    if (!all_masked) {
      AttentionParams orig = AttentionParams::init(hidden, heads, OperatorKind::Original, rng, 0.2);
      Tensor probs = attention_probs(h, orig, OperatorKind::Original, mask);
      asym_sample = std::max(asym_sample,
                             asymmetry_ratio(compat_scores(h, orig, OperatorKind::Original)));
      for (int g = 0; g < heads; ++g) {
        for (int a = 0; a < seq; ++a) {
          double total = 0.0;
          for (int b = 0; b < seq; ++b) {
            const double w = probs.values()[(static_cast<std::size_t>(g) * seq + a) * seq + b];
            total += w;
            if (mask.data[static_cast<std::size_t>(b)] == 0) masked_worst = std::max(masked_worst, w);
          }
          row_worst = std::max(row_worst, std::fabs(total - 1.0));
        }
      }
    }
  }

  char detail[96];
  std::snprintf(detail, sizeof(detail), "original-operator asymmetry ratio sample: %.3f",
                asym_sample);
  return {
      bounded("symmetric transpose-invariance", sym_worst, 1e-12),
      bounded("pairwise S=I reduces to symmetric", reduce_worst, 1e-12),
      bounded("original with K=Q reduces to symmetric", tied_worst, 1e-12),
      bounded("base-change factorization S = Wq.Wk^T", factor_worst, 1e-10),
      bounded("attention rows sum to one", row_worst, 1e-12),
      bounded("masked keys receive no weight", masked_worst, 1e-30, detail),
  };
}

// ---------------------------------------------------------------------------
// Long-double reference forward
// ---------------------------------------------------------------------------

namespace {

using ldvec = std::vector<long double>;

// x[rows x in] . w[in x out] + b, all indices over raw spans
void ref_affine(const ldvec& x, std::span<const double> w, std::span<const double> b,
                std::size_t rows, std::size_t in, std::size_t out, ldvec& result) {
  result.assign(rows * out, 0.0L);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < out; ++j) {
      long double acc = b.empty() ? 0.0L : static_cast<long double>(b[j]);
      for (std::size_t c = 0; c < in; ++c) {
        acc += x[r * in + c] * static_cast<long double>(w[c * out + j]);
      }
      result[r * out + j] = acc;
    }
  }
}

void ref_layer_norm(ldvec& x, std::span<const double> gamma, std::span<const double> beta,
                    std::size_t width, long double eps) {
  const std::size_t rows = x.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    long double* row = x.data() + r * width;
    long double mean = 0.0L;
    for (std::size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<long double>(width);
    long double var = 0.0L;
    for (std::size_t j = 0; j < width; ++j) {
      const long double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<long double>(width);
    const long double inv = 1.0L / sqrtl(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      row[j] = static_cast<long double>(gamma[j]) * ((row[j] - mean) * inv) +
               static_cast<long double>(beta[j]);
    }
  }
}

void ref_gelu(ldvec& x) {
  const long double inv_sqrt2 = 0.707106781186547524400844362104849L;
  for (long double& v : x) v = 0.5L * v * (1.0L + erfl(v * inv_sqrt2));
}

}  // namespace

long double reference_mlm_loss(const EncoderModel& model, const MaskedBatch& batch) {
  const ModelConfig& cfg = model.config;
  const std::size_t B = static_cast<std::size_t>(batch.input_ids.dim(0));
  const std::size_t L = static_cast<std::size_t>(batch.input_ids.dim(1));
  const std::size_t H = static_cast<std::size_t>(cfg.hidden);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t d = H / heads;
  const std::size_t rows = B * L;

  ldvec x(rows * H);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      const int id = batch.input_ids.data[b * L + t];
      for (std::size_t c = 0; c < H; ++c) {
        x[(b * L + t) * H + c] =
            static_cast<long double>(model.token_embedding.values()[static_cast<std::size_t>(id) * H + c]) +
            static_cast<long double>(model.position_embedding.values()[t * H + c]) +
            static_cast<long double>(model.type_embedding.values()[c]);
      }
    }
  }
  ref_layer_norm(x, model.emb_ln_gamma.values(), model.emb_ln_beta.values(), H, cfg.ln_eps);

  ldvec q, k, v, ctx, inter, ffn;
  for (const EncoderLayer& layer : model.layers) {
    const AttentionParams& ap = layer.attention;
    ref_affine(x, ap.w_q.values(), ap.b_q.values(), rows, H, H, q);
    if (cfg.operator_kind == OperatorKind::Original) {
      ref_affine(x, ap.w_k.values(), ap.b_k.values(), rows, H, H, k);
    } else {
      k = q;
    }
    ref_affine(x, ap.w_v.values(), ap.b_v.values(), rows, H, H, v);

    ctx.assign(rows * H, 0.0L);
    ldvec scores(L);
    ldvec sq(d);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < heads; ++i) {
        const std::size_t off = i * d;
        for (std::size_t s = 0; s < L; ++s) {
          const long double* qrow = q.data() + (b * L + s) * H + off;
          for (std::size_t t = 0; t < L; ++t) {
            long double acc = 0.0L;
            if (cfg.operator_kind == OperatorKind::Pairwise) {
              const auto sv = ap.s_heads[i].values();
              const long double* krow = q.data() + (b * L + t) * H + off;
              for (std::size_t c = 0; c < d; ++c) {
                long double inner = 0.0L;
                for (std::size_t e = 0; e < d; ++e) {
                  inner += static_cast<long double>(sv[c * d + e]) * krow[e];
                }
                sq[c] = inner;
              }
              for (std::size_t c = 0; c < d; ++c) acc += qrow[c] * sq[c];
            } else {
              const long double* krow = k.data() + (b * L + t) * H + off;
              for (std::size_t c = 0; c < d; ++c) acc += qrow[c] * krow[c];
            }
            acc /= sqrtl(static_cast<long double>(d));
            if (batch.attention_mask.data[b * L + t] == 0) acc += -1e9L;
            scores[t] = acc;
          }
          long double mx = scores[0];
          for (long double s2 : scores) mx = std::max(mx, s2);
          long double denom = 0.0L;
          for (std::size_t t = 0; t < L; ++t) {
            scores[t] = expl(scores[t] - mx);
            denom += scores[t];
          }
          long double* orow = ctx.data() + (b * L + s) * H + off;
          for (std::size_t t = 0; t < L; ++t) {
            const long double w = scores[t] / denom;
            const long double* vrow = v.data() + (b * L + t) * H + off;
            for (std::size_t c = 0; c < d; ++c) orow[c] += w * vrow[c];
          }
        }
      }
    }

    ldvec attn_out;
    ref_affine(ctx, ap.w_o.values(), ap.b_o.values(), rows, H, H, attn_out);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];
    ref_layer_norm(x, layer.attn_ln_gamma.values(), layer.attn_ln_beta.values(), H, cfg.ln_eps);

    const std::size_t inter_w = static_cast<std::size_t>(cfg.intermediate);
    ref_affine(x, layer.inter_w.values(), layer.inter_b.values(), rows, H, inter_w, inter);
    ref_gelu(inter);
    ref_affine(inter, layer.output_w.values(), layer.output_b.values(), rows, inter_w, H, ffn);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += ffn[i];
    ref_layer_norm(x, layer.out_ln_gamma.values(), layer.out_ln_beta.values(), H, cfg.ln_eps);
  }

  ldvec transformed;
  ref_affine(x, model.mlm_transform_w.values(), model.mlm_transform_b.values(), rows, H, H,
             transformed);
  ref_gelu(transformed);
  ref_layer_norm(transformed, model.mlm_ln_gamma.values(), model.mlm_ln_beta.values(), H,
                 cfg.ln_eps);

  const std::size_t vocab = static_cast<std::size_t>(cfg.vocab_size);
  long double total = 0.0L;
  std::size_t count = 0;
  ldvec logits(vocab);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    const int label = batch.labels.data[pos];
    if (label == -1) continue;
    for (std::size_t vtok = 0; vtok < vocab; ++vtok) {
      long double acc = static_cast<long double>(model.mlm_decoder_bias.values()[vtok]);
      if (cfg.tie_mlm_decoder) {
        for (std::size_t c = 0; c < H; ++c) {
          acc += transformed[pos * H + c] *
                 static_cast<long double>(model.token_embedding.values()[vtok * H + c]);
        }
      } else {
        for (std::size_t c = 0; c < H; ++c) {
          acc += transformed[pos * H + c] *
                 static_cast<long double>(model.mlm_decoder_w.values()[c * vocab + vtok]);
        }
      }
      logits[vtok] = acc;
    }
    long double mx = logits[0];
    for (long double v2 : logits) mx = std::max(mx, v2);
    long double denom = 0.0L;
    for (long double v2 : logits) denom += expl(v2 - mx);
    total += logl(denom) + mx - logits[static_cast<std::size_t>(label)];
    ++count;
  }
  if (count == 0) throw std::runtime_error("reference_mlm_loss: every label is ignored");
  return total / static_cast<long double>(count);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

double model_grad_max_rel_error(EncoderModel& model, const MaskedBatch& batch, double step) {
  auto params = model.parameters();
  for (NamedParam& p : params) p.tensor.zero_grad();
  Tensor loss = cross_entropy_masked(forward_mlm(model, batch, nullptr), batch.labels);
  backward(loss);

  double worst = 0.0;
  for (NamedParam& p : params) {
    const auto analytic = p.tensor.grad();
    auto values = p.tensor.values_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto central = [&](double h) {
        values[i] = saved + h;
        const double hi = values[i];
        const long double up = reference_mlm_loss(model, batch);
        values[i] = saved - h;
        const double lo = values[i];
        const long double down = reference_mlm_loss(model, batch);
        values[i] = saved;
        // divide by the realized span; the perturbed values are doubles
        return (up - down) / (static_cast<long double>(hi) - static_cast<long double>(lo));
      };
      // One Richardson halving cancels the O(h^2) bias of the central
      // estimator, which otherwise reaches ~4e-4 relative on coordinates
      // with large third derivatives at this step size.
      const long double coarse = central(step);
      const long double fine = central(step / 2);
      const double fd = static_cast<double>((4.0L * fine - coarse) / 3.0L);
      worst = std::max(worst, rel_err(analytic[i], fd));
    }
  }
  return worst;
}

std::vector<CheckResult> verify_gradients(std::uint64_t seed) {
  std::vector<CheckResult> results;
  Rng rng(mix_seed(seed, 0x67726164));

  // one attention layer per operator, every parameter tensor
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    AttentionParams params = AttentionParams::init(8, 2, kind, rng, 0.2);
    Tensor h = Tensor::uniform({1, 3, 8}, rng, -1.0, 1.0);
    IntTensor mask = IntTensor::full({1, 3}, 1);
    Rng wrng(mix_seed(seed, 0x636f74));
    Tensor cotangent = Tensor::uniform({1, 3, 8}, wrng, -1.0, 1.0);

    auto loss_of = [&]() { return sum(mul(attention_forward(h, params, kind, mask), cotangent)); };
    std::vector<Tensor> leaves{params.w_q, params.b_q, params.w_v, params.b_v, params.w_o,
                               params.b_o};
    if (kind == OperatorKind::Original) {
      leaves.push_back(params.w_k);
      leaves.push_back(params.b_k);
    }
    for (const Tensor& s : params.s_heads) leaves.push_back(s);

    for (Tensor leaf : leaves) leaf.zero_grad();
    backward(loss_of());
    double worst = 0.0;
    for (Tensor leaf : leaves) {
      const auto analytic = leaf.grad();
      auto values = leaf.values_mut();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + 1e-4;
        double up;
        {
          NoGradGuard ng;
          up = loss_of().item();
        }
        values[i] = saved - 1e-4;
        double down;
        {
          NoGradGuard ng;
          down = loss_of().item();
        }
        values[i] = saved;
        worst = std::max(worst, rel_err(analytic[i], (up - down) / 2e-4));
      }
    }
    results.push_back(
        bounded(std::string("attention layer gradients (") + to_string(kind) + ")", worst, 1e-4));
  }

  // full tiny model, all operators
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    EncoderModel model = build_model(ModelConfig::tiny(kind), mix_seed(seed, 0x6d646c));
    MaskedBatch batch;
    batch.input_ids = IntTensor({1, 4}, {2, 1, 6, 3});   // [CLS] [MASK] token [SEP]
    batch.labels = IntTensor({1, 4}, {-1, 7, 10, -1});
    batch.attention_mask = IntTensor::full({1, 4}, 1);
    const double worst = model_grad_max_rel_error(model, batch);
    results.push_back(
        bounded(std::string("tiny model gradients (") + to_string(kind) + ")", worst, 1e-4));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Counts
// ---------------------------------------------------------------------------

std::vector<CheckResult> verify_counts(std::uint64_t seed, int random_configs) {
  std::vector<CheckResult> results;

  struct Expectation {
    const char* name;
    ModelConfig config;
    std::int64_t count;
    const char* savings;
  };
  const Expectation table[] = {
      {"bert-small original", ModelConfig::bert_small(OperatorKind::Original), 28795194, nullptr},
      {"bert-small symmetric", ModelConfig::bert_small(OperatorKind::Symmetric), 27744570, "3.65"},
      {"bert-small pairwise", ModelConfig::bert_small(OperatorKind::Pairwise), 27875642, "3.19"},
      {"bert-base original", ModelConfig::bert_base(OperatorKind::Original), 109514298, nullptr},
      {"bert-base symmetric", ModelConfig::bert_base(OperatorKind::Symmetric), 102427194, "6.47"},
      {"bert-base pairwise", ModelConfig::bert_base(OperatorKind::Pairwise), 103017018, "5.93"},
  };
  for (const Expectation& e : table) {
    const std::int64_t got = count_params(e.config);
    CheckResult r;
    r.name = std::string("count ") + e.name;
    r.worst = static_cast<double>(std::llabs(got - e.count));
    r.bound = 0.0;
    r.pass = got == e.count;
    if (!r.pass) r.detail = "expected " + std::to_string(e.count) + ", got " + std::to_string(got);
    if (r.pass && e.savings != nullptr) {
      ModelConfig original_config = e.config;
      original_config.operator_kind = OperatorKind::Original;
      const std::string pct = savings_percent(got, count_params(original_config));
      if (pct != e.savings) {
        r.pass = false;
        r.detail += "; savings " + pct + " != " + e.savings;
      }
    }
    results.push_back(std::move(r));
  }

  // alloc-vs-formula on random small configs across every operator
  Rng rng(mix_seed(seed, 0x636e74));
  double alloc_worst = 0.0;
  int checked = 0;
  for (int i = 0; i < random_configs; ++i) {
    ModelConfig c;
    c.n_heads = 1 << rng.uniform_int(3);
    c.hidden = c.n_heads * static_cast<int>(2 + rng.uniform_int(14));
    c.vocab_size = 8 + static_cast<int>(rng.uniform_int(200));
    c.max_positions = 4 + static_cast<int>(rng.uniform_int(60));
    c.type_vocab_size = 1 + static_cast<int>(rng.uniform_int(3));
    c.n_layers = 1 + static_cast<int>(rng.uniform_int(3));
    c.intermediate = 8 + static_cast<int>(rng.uniform_int(120));
    c.tie_mlm_decoder = rng.uniform() < 0.75;
    const OperatorKind kinds[] = {OperatorKind::Original, OperatorKind::Symmetric,
                                  OperatorKind::Pairwise};
    c.operator_kind = kinds[rng.uniform_int(3)];
    EncoderModel model = build_model(c, rng.next_u64());
    alloc_worst = std::max(alloc_worst, static_cast<double>(std::llabs(
                                            model.allocated_param_count() - count_params(c))));
    ++checked;
  }
  results.push_back(bounded("allocated scalars equal closed-form count", alloc_worst, 0.0,
                            std::to_string(checked) + " random configs"));
  return results;
}

}  // namespace attnlab
