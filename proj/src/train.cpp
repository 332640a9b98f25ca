#include "attnlab/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>
#include <stdexcept>

namespace attnlab {

namespace {
constexpr std::uint64_t kStreamBatch = 0x6261746368;
constexpr std::uint64_t kStreamMask = 0x6d61736b;
constexpr std::uint64_t kStreamEvalMask = 0x6576616c;
constexpr std::uint64_t kStreamDropout = 0x64726f70;
}  // namespace

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (peak_lr <= 0.0) throw std::invalid_argument("TrainConfig: peak_lr must be positive");
  if (warmup_steps < 0 || warmup_steps > steps) {
    throw std::invalid_argument("TrainConfig: warmup_steps must lie in [0, steps]");
  }
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("TrainConfig: betas must lie in (0, 1)");
  }
  if (adam_eps <= 0.0) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be non-negative");
  if (mask_prob < 0.0 || mask_prob >= 1.0) {
    throw std::invalid_argument("TrainConfig: mask_prob must lie in [0, 1)");
  }
  if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be positive");
  if (eval_batches < 1) throw std::invalid_argument("TrainConfig: eval_batches must be positive");
}

double lr_at(int step, const TrainConfig& config) {
  config.validate();
  if (step < 0 || step > config.steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(config.steps) + "]");
  }
  if (step <= config.warmup_steps) {
    if (config.warmup_steps == 0) return config.peak_lr;
    return config.peak_lr * static_cast<double>(step) / config.warmup_steps;
  }
  const int decay_span = config.steps - config.warmup_steps;
  return config.peak_lr * static_cast<double>(config.steps - step) / decay_span;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<NamedParam> params, const TrainConfig& config)
    : beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_eps),
      weight_decay_(config.weight_decay) {
  slots_.reserve(params.size());
  for (NamedParam& p : params) {
    Slot slot;
    slot.param = std::move(p);
    slot.m.assign(slot.param.tensor.numel(), 0.0);
    slot.v.assign(slot.param.tensor.numel(), 0.0);
    slots_.push_back(std::move(slot));
  }
}

void AdamW::zero_grad() {
  for (Slot& slot : slots_) slot.param.tensor.zero_grad();
}

void AdamW::step(double lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, step_count_);
  const double bc2 = 1.0 - std::pow(beta2_, step_count_);
  for (Slot& slot : slots_) {
    if (!slot.param.tensor.has_grad()) {
      throw std::runtime_error("AdamW: missing gradient for parameter '" + slot.param.name + "'");
    }
    const auto g = slot.param.tensor.grad();
    auto theta = slot.param.tensor.values_mut();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      double update = lr * m_hat / (std::sqrt(v_hat) + eps_);
      if (slot.param.weight_decay && weight_decay_ > 0.0) update += lr * weight_decay_ * theta[i];
      theta[i] -= update;
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a_ints(std::uint64_t hash, const std::vector<int>& values) {
  for (int v : values) {
    std::uint32_t u;
    std::memcpy(&u, &v, sizeof(u));
    for (int b = 0; b < 4; ++b) {
      hash ^= (u >> (8 * b)) & 0xffu;
      hash *= 0x100000001b3ULL;
    }
  }
  return hash;
}

}  // namespace

RunTrace train(EncoderModel& model, const Corpus& corpus, const TrainConfig& config) {
  config.validate();
  model.config.validate();
  if (corpus.n_sequences < 1) throw std::invalid_argument("train: corpus is empty");
  if (corpus.spec.vocab_size != model.config.vocab_size) {
    throw std::invalid_argument("train: corpus vocab " + std::to_string(corpus.spec.vocab_size) +
                                " does not match model vocab " +
                                std::to_string(model.config.vocab_size));
  }
  if (corpus.spec.seq_len > model.config.max_positions) {
    throw std::invalid_argument("train: corpus sequences longer than model max_positions");
  }
  const int eval_need = config.eval_batches * config.batch_size;
  const int train_count = corpus.n_sequences - eval_need;
  if (train_count < 1) {
    throw std::invalid_argument("train: corpus too small; need more than " +
                                std::to_string(eval_need) + " sequences for the eval split");
  }

  const auto t0 = std::chrono::steady_clock::now();

  // Held-out slice fixed before training: the final eval_need sequences,
  // masked once so every evaluation sees identical batches.
  std::vector<MaskedBatch> eval_set;
  eval_set.reserve(static_cast<std::size_t>(config.eval_batches));
  for (int e = 0; e < config.eval_batches; ++e) {
    std::vector<std::span<const int>> views;
    views.reserve(static_cast<std::size_t>(config.batch_size));
    for (int b = 0; b < config.batch_size; ++b) {
      views.push_back(corpus.sequence(train_count + e * config.batch_size + b));
    }
    eval_set.push_back(mask_batch(views, corpus.spec.vocab_size,
                                  {config.mask_prob, config.mask_token_only},
                                  mix_seed(config.seed, kStreamEvalMask, static_cast<std::uint64_t>(e))));
  }
  auto eval_loss = [&]() {
    NoGradGuard no_grad;
    double total = 0.0;
    for (const MaskedBatch& batch : eval_set) {
      total += cross_entropy_masked(forward_mlm(model, batch, nullptr), batch.labels).item();
    }
    return total / config.eval_batches;
  };

  RunTrace trace;
  trace.model_config = model.config;
  trace.train_config = config;
  trace.corpus_spec = corpus.spec;
  trace.corpus_sequences = corpus.n_sequences;

  AdamW optimizer(model.parameters(), config);
  std::uint64_t digest = 0xcbf29ce484222325ULL;  // FNV-1a offset basis

  trace.records.push_back({0, std::nan(""), eval_loss(), lr_at(0, config)});

  double last_train_loss = std::nan("");
  for (int step = 0; step < config.steps; ++step) {
    Rng batch_rng(mix_seed(config.seed, kStreamBatch, static_cast<std::uint64_t>(step)));
    std::vector<std::span<const int>> views;
    views.reserve(static_cast<std::size_t>(config.batch_size));
    for (int b = 0; b < config.batch_size; ++b) {
      views.push_back(corpus.sequence(
          static_cast<int>(batch_rng.uniform_int(static_cast<std::uint64_t>(train_count)))));
    }
    const MaskedBatch batch =
        mask_batch(views, corpus.spec.vocab_size, {config.mask_prob, config.mask_token_only},
                   mix_seed(config.seed, kStreamMask, static_cast<std::uint64_t>(step)));
    digest = fnv1a_ints(digest, batch.input_ids.data);
    digest = fnv1a_ints(digest, batch.labels.data);

    Rng dropout_rng(mix_seed(config.seed, kStreamDropout, static_cast<std::uint64_t>(step)));
    Tensor loss = cross_entropy_masked(forward_mlm(model, batch, &dropout_rng), batch.labels);
    last_train_loss = loss.item();
    if (!std::isfinite(last_train_loss)) {
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    }
    optimizer.zero_grad();
    backward(loss);
    optimizer.step(lr_at(step, config));

    const int done = step + 1;
    if (done % config.eval_every == 0 || done == config.steps) {
      trace.records.push_back({done, last_train_loss, eval_loss(), lr_at(done, config)});
    }
  }

  trace.batch_digest = digest;
  trace.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return trace;
}

// ---------------------------------------------------------------------------
// Trace analysis
// ---------------------------------------------------------------------------

std::optional<int> steps_to_fraction(const RunTrace& trace, double fraction) {
  if (trace.records.size() < 2) {
    throw std::invalid_argument("steps_to_fraction: trace needs at least two eval records");
  }
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("steps_to_fraction: fraction must lie in (0, 1)");
  }
  const double initial = trace.records.front().eval_loss;
  const double final_loss = trace.records.back().eval_loss;
  const double total_drop = initial - final_loss;
  if (!(total_drop > 0.0)) return std::nullopt;  // flat or worsening trace
  for (const TraceRecord& rec : trace.records) {
    if (initial - rec.eval_loss >= fraction * total_drop) return rec.step;
  }
  return std::nullopt;
}

std::optional<int> plateau_exit_step(const RunTrace& trace, double drop) {
  if (trace.records.empty()) {
    throw std::invalid_argument("plateau_exit_step: empty trace");
  }
  const double initial = trace.records.front().eval_loss;
  for (const TraceRecord& rec : trace.records) {
    if (rec.eval_loss < initial - drop) return rec.step;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV serialization
// ---------------------------------------------------------------------------

namespace {

std::string fmt_g(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

std::string fmt10(double v) { return fmt_g(v, 10); }
std::string fmt17(double v) { return fmt_g(v, 17); }

}  // namespace

std::string trace_to_csv(const RunTrace& trace) {
  std::ostringstream out;
  const ModelConfig& m = trace.model_config;
  const TrainConfig& t = trace.train_config;
  const CorpusSpec& c = trace.corpus_spec;
  out << "# schema=attnlab-trace-v1\n";
  out << "# operator=" << to_string(m.operator_kind) << "\n";
  out << "# model_vocab=" << m.vocab_size << "\n";
  out << "# model_max_positions=" << m.max_positions << "\n";
  out << "# model_type_vocab=" << m.type_vocab_size << "\n";
  out << "# model_layers=" << m.n_layers << "\n";
  out << "# model_heads=" << m.n_heads << "\n";
  out << "# model_hidden=" << m.hidden << "\n";
  out << "# model_intermediate=" << m.intermediate << "\n";
  out << "# model_ln_eps=" << fmt17(m.ln_eps) << "\n";
  out << "# model_dropout=" << fmt17(m.dropout) << "\n";
  out << "# model_tie_decoder=" << (m.tie_mlm_decoder ? 1 : 0) << "\n";
  out << "# corpus_vocab=" << c.vocab_size << "\n";
  out << "# corpus_seq_len=" << c.seq_len << "\n";
  out << "# corpus_order=" << c.markov_order << "\n";
  out << "# corpus_temperature=" << fmt17(c.transition_temperature) << "\n";
  out << "# corpus_seed=" << c.seed << "\n";
  out << "# corpus_sequences=" << trace.corpus_sequences << "\n";
  out << "# train_steps=" << t.steps << "\n";
  out << "# train_batch=" << t.batch_size << "\n";
  out << "# train_peak_lr=" << fmt17(t.peak_lr) << "\n";
  out << "# train_warmup=" << t.warmup_steps << "\n";
  out << "# train_beta1=" << fmt17(t.beta1) << "\n";
  out << "# train_beta2=" << fmt17(t.beta2) << "\n";
  out << "# train_adam_eps=" << fmt17(t.adam_eps) << "\n";
  out << "# train_weight_decay=" << fmt17(t.weight_decay) << "\n";
  out << "# train_mask_prob=" << fmt17(t.mask_prob) << "\n";
  out << "# train_mask_only=" << (t.mask_token_only ? 1 : 0) << "\n";
  out << "# train_eval_every=" << t.eval_every << "\n";
  out << "# train_eval_batches=" << t.eval_batches << "\n";
  out << "# seed=" << t.seed << "\n";
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(trace.batch_digest));
    out << "# batch_digest=" << buf << "\n";
  }
  out << "step,train_loss,eval_loss,lr\n";
  for (const TraceRecord& rec : trace.records) {
    out << rec.step << "," << fmt10(rec.train_loss) << "," << fmt10(rec.eval_loss) << ","
        << fmt10(rec.lr) << "\n";
  }
  return out.str();
}

RunTrace trace_from_csv(const std::string& text) {
  RunTrace trace;
  std::map<std::string, std::string> meta;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("trace: malformed metadata line: " + line);
      meta[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    if (!header_seen) {
      if (line != "step,train_loss,eval_loss,lr") {
        throw std::runtime_error("trace: unexpected header line: " + line);
      }
      header_seen = true;
      continue;
    }
    TraceRecord rec;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &rec.step, &rec.train_loss, &rec.eval_loss,
                    &rec.lr) != 4) {
      throw std::runtime_error("trace: malformed row: " + line);
    }
    trace.records.push_back(rec);
  }
  if (!header_seen) throw std::runtime_error("trace: missing CSV header");

  auto req = [&](const std::string& key) {
    const auto it = meta.find(key);
    if (it == meta.end()) throw std::runtime_error("trace: missing metadata key " + key);
    return it->second;
  };
  if (req("schema") != "attnlab-trace-v1") {
    throw std::runtime_error("trace: unsupported schema " + req("schema"));
  }
  const auto kind = operator_kind_from_string(req("operator"));
  if (!kind) throw std::runtime_error("trace: unknown operator " + req("operator"));
  ModelConfig& m = trace.model_config;
  m.operator_kind = *kind;
  m.vocab_size = std::stoi(req("model_vocab"));
  m.max_positions = std::stoi(req("model_max_positions"));
  m.type_vocab_size = std::stoi(req("model_type_vocab"));
  m.n_layers = std::stoi(req("model_layers"));
  m.n_heads = std::stoi(req("model_heads"));
  m.hidden = std::stoi(req("model_hidden"));
  m.intermediate = std::stoi(req("model_intermediate"));
  m.ln_eps = std::stod(req("model_ln_eps"));
  m.dropout = std::stod(req("model_dropout"));
  m.tie_mlm_decoder = req("model_tie_decoder") == "1";
  CorpusSpec& c = trace.corpus_spec;
  c.vocab_size = std::stoi(req("corpus_vocab"));
  c.seq_len = std::stoi(req("corpus_seq_len"));
  c.markov_order = std::stoi(req("corpus_order"));
  c.transition_temperature = std::stod(req("corpus_temperature"));
  c.seed = std::stoull(req("corpus_seed"));
  trace.corpus_sequences = std::stoi(req("corpus_sequences"));
  TrainConfig& t = trace.train_config;
  t.steps = std::stoi(req("train_steps"));
  t.batch_size = std::stoi(req("train_batch"));
  t.peak_lr = std::stod(req("train_peak_lr"));
  t.warmup_steps = std::stoi(req("train_warmup"));
  t.beta1 = std::stod(req("train_beta1"));
  t.beta2 = std::stod(req("train_beta2"));
  t.adam_eps = std::stod(req("train_adam_eps"));
  t.weight_decay = std::stod(req("train_weight_decay"));
  t.mask_prob = std::stod(req("train_mask_prob"));
  t.mask_token_only = req("train_mask_only") == "1";
  t.eval_every = std::stoi(req("train_eval_every"));
  t.eval_batches = std::stoi(req("train_eval_batches"));
  t.seed = std::stoull(req("seed"));
  trace.batch_digest = std::stoull(req("batch_digest"), nullptr, 16);
  return trace;
}

}  // namespace attnlab
