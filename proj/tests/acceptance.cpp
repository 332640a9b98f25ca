// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Criterion 6 performs the full toy training runs and dominates the runtime
// (roughly ten minutes of CPU).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "attnlab/commands.hpp"
#include "attnlab/data.hpp"
#include "attnlab/model.hpp"
#include "attnlab/train.hpp"
#include "attnlab/verification.hpp"

using namespace attnlab;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail = {}) {
  std::printf("CRITERION %d  %-38s %s\n", id, name.c_str(), pass ? "PASS" : "FAIL");
  if (!detail.empty()) std::printf("             %s\n", detail.c_str());
  if (!pass) ++g_failures;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

// 1. six reference counts, zero tolerance, plus the printed savings figures
void criterion_table2() {
  struct Case {
    ModelConfig config;
    std::int64_t expect;
    const char* savings;
  };
  const Case cases[] = {
      {ModelConfig::bert_small(OperatorKind::Original), 28795194, nullptr},
      {ModelConfig::bert_small(OperatorKind::Symmetric), 27744570, "3.65"},
      {ModelConfig::bert_small(OperatorKind::Pairwise), 27875642, "3.19"},
      {ModelConfig::bert_base(OperatorKind::Original), 109514298, nullptr},
      {ModelConfig::bert_base(OperatorKind::Symmetric), 102427194, "6.47"},
      {ModelConfig::bert_base(OperatorKind::Pairwise), 103017018, "5.93"},
  };
  bool pass = true;
  std::string detail;
  for (const Case& c : cases) {
    const std::int64_t got = count_params(c.config);
    if (got != c.expect) {
      pass = false;
      detail += " count " + std::to_string(got) + " != " + std::to_string(c.expect) + ";";
    }
    if (c.savings != nullptr) {
      ModelConfig original = c.config;
      original.operator_kind = OperatorKind::Original;
      const std::string pct = savings_percent(got, count_params(original));
      if (pct != c.savings) {
        pass = false;
        detail += " savings " + pct + " != " + c.savings + ";";
      }
    }
  }
  report(1, "reference parameter counts, exact", pass, detail);
}

// 2. allocated scalars equal count_params on 50 random configs, every kind
void criterion_allocation() {
  Rng rng(881);
  bool pass = true;
  std::string detail;
  for (int i = 0; i < 50 && pass; ++i) {
    ModelConfig base;
    base.n_heads = 1 << rng.uniform_int(3);
    base.hidden = base.n_heads * static_cast<int>(2 + rng.uniform_int(14));
    base.vocab_size = 8 + static_cast<int>(rng.uniform_int(300));
    base.max_positions = 4 + static_cast<int>(rng.uniform_int(60));
    base.type_vocab_size = 1 + static_cast<int>(rng.uniform_int(3));
    base.n_layers = 1 + static_cast<int>(rng.uniform_int(4));
    base.intermediate = 8 + static_cast<int>(rng.uniform_int(128));
    base.tie_mlm_decoder = rng.uniform() < 0.75;
    for (OperatorKind kind :
         {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
      ModelConfig cfg = base;
      cfg.operator_kind = kind;
      EncoderModel model = build_model(cfg, rng.next_u64());
      if (model.allocated_param_count() != count_params(cfg)) {
        pass = false;
        detail = "config " + std::to_string(i) + " (" + to_string(kind) + "): allocated " +
                 std::to_string(model.allocated_param_count()) + " != " +
                 std::to_string(count_params(cfg));
        break;
      }
    }
  }
  report(2, "allocation consistency (50 configs x 3)", pass, detail);
}

// 3. algebraic identities on 100 random instances each
void criterion_algebra() {
  bool pass = true;
  std::string detail;
  for (const CheckResult& r : verify_algebra(20240601, 100)) {
    if (r.name == "symmetric transpose-invariance" ||
        r.name == "pairwise S=I reduces to symmetric" ||
        r.name == "base-change factorization S = Wq.Wk^T") {
      if (!r.pass) pass = false;
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%s: %.2e (bound %.0e); ", r.name.c_str(), r.worst, r.bound);
      detail += buf;
    }
  }
  report(3, "algebraic identities (100 trials each)", pass, detail);
}

// 4. full tiny-model gradients, every tensor including S_heads
void criterion_gradients() {
  bool pass = true;
  std::string detail;
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    EncoderModel model = build_model(ModelConfig::tiny(kind), 20240601);
    MaskedBatch batch;
    batch.input_ids = IntTensor({1, 4}, {2, 1, 6, 3});
    batch.labels = IntTensor({1, 4}, {-1, 7, 10, -1});
    batch.attention_mask = IntTensor::full({1, 4}, 1);
    const double worst = model_grad_max_rel_error(model, batch, 1e-4);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s %.2e; ", to_string(kind), worst);
    detail += buf;
    if (worst > 1e-4) pass = false;
  }
  report(4, "gradient correctness (tiny model)", pass, detail + "bound 1e-4");
}

// 5. adamw vs a scalar oracle over ten steps; exact schedule endpoints at
//    the BERT-scale recipe values
void criterion_optimizer() {
  bool pass = true;
  std::string detail;

  TrainConfig opt_cfg;
  opt_cfg.weight_decay = 0.0;
  opt_cfg.adam_eps = 1e-12;
  Tensor w = Tensor::from_data({1}, {0.3}, true);
  AdamW opt({{"w", w, true}}, opt_cfg);
  double theta = 0.3, m = 0.0, v = 0.0;
  Rng rng(31337);
  double worst = 0.0;
  for (int t = 1; t <= 10; ++t) {
    const double g = rng.uniform(-1.0, 1.0);
    const double lr = 2e-3;
    m = opt_cfg.beta1 * m + (1.0 - opt_cfg.beta1) * g;
    v = opt_cfg.beta2 * v + (1.0 - opt_cfg.beta2) * g * g;
    theta -= lr * (m / (1.0 - std::pow(opt_cfg.beta1, t))) /
             (std::sqrt(v / (1.0 - std::pow(opt_cfg.beta2, t))) + opt_cfg.adam_eps);
    w.zero_grad();
    w.grad_mut()[0] = g;
    opt.step(lr);
    worst = std::max(worst, std::fabs(w.values()[0] - theta));
  }
  if (worst > 1e-12) pass = false;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "adamw vs oracle max |diff| %.2e (bound 1e-12); ", worst);
  detail += buf;

  TrainConfig sched;  // BERT-scale recipe: peak 1e-4, warmup 10k of 200k
  sched.steps = 200000;
  sched.warmup_steps = 10000;
  sched.peak_lr = 1e-4;
  const bool sched_ok =
      lr_at(0, sched) == 0.0 && lr_at(10000, sched) == 1e-4 && lr_at(200000, sched) == 0.0;
  if (!sched_ok) pass = false;
  detail += sched_ok ? "lr_at endpoints exact" : "lr_at endpoints WRONG";
  report(5, "optimizer and schedule fidelity", pass, detail);
}

struct ToyRuns {
  std::filesystem::path root;
  std::vector<std::filesystem::path> trace_paths;
  std::vector<RunTrace> traces;
  bool ran = false;
};

// 6. toy smoke convergence: >= 1.0 nat drop per operator, sane baseline,
//    finite steps_to_fraction(0.95) in the comparison report
ToyRuns criterion_toy_training() {
  ToyRuns runs;
  runs.root = std::filesystem::temp_directory_path() / "attnlab_acceptance";
  std::filesystem::remove_all(runs.root);

  bool pass = true;
  std::string detail;
  const double baseline = std::log(60.0);
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    TrainOptions opts;
    opts.model = ModelConfig::toy(kind);
    opts.out_dir = runs.root / to_string(kind);
    std::ostringstream sink;
    if (cmd_train(opts, sink) != kExitOk) {
      report(6, "toy training smoke convergence", false, "cmd_train failed for " +
                                                             std::string(to_string(kind)));
      return runs;
    }
    runs.trace_paths.push_back(opts.out_dir / "trace.csv");
    runs.traces.push_back(trace_from_csv(read_file(runs.trace_paths.back())));
    const RunTrace& trace = runs.traces.back();
    const double initial = trace.records.front().eval_loss;
    const double final_loss = trace.records.back().eval_loss;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s %.3f->%.3f; ", to_string(kind), initial, final_loss);
    detail += buf;
    if (initial - final_loss < 1.0) pass = false;
    if (std::fabs(initial - baseline) > 0.5) pass = false;
    if (!steps_to_fraction(trace, 0.95).has_value()) pass = false;
  }

  // the comparison report must accept the three traces and emit finite
  // steps-to-95% markers
  CompareOptions cmp;
  cmp.traces = runs.trace_paths;
  cmp.out_dir = runs.root / "compare";
  std::ostringstream cmp_out;
  if (cmd_compare(cmp, cmp_out) != kExitOk) {
    pass = false;
    detail += "cmd_compare refused the traces; ";
  } else if (cmp_out.str().find("none") != std::string::npos) {
    pass = false;
    detail += "comparison report contains a no-convergence marker; ";
  }
  runs.ran = true;
  report(6, "toy training smoke convergence", pass, detail + "(required drop >= 1.0 nat)");
  return runs;
}

// 7. byte-identical rerun, identical batch digests across operators
void criterion_determinism(const ToyRuns& runs) {
  if (!runs.ran) {
    report(7, "determinism of cmd_train", false, "toy runs unavailable");
    return;
  }
  TrainOptions opts;
  opts.model = ModelConfig::toy(OperatorKind::Pairwise);
  opts.out_dir = runs.root / "pairwise-rerun";
  std::ostringstream sink;
  bool pass = cmd_train(opts, sink) == kExitOk;
  std::string detail;
  if (pass) {
    const std::string first = read_file(runs.root / "pairwise" / "trace.csv");
    const std::string second = read_file(opts.out_dir / "trace.csv");
    if (first.empty() || first != second) {
      pass = false;
      detail += "rerun trace differs; ";
    } else {
      detail += "pairwise rerun byte-identical; ";
    }
  }
  const std::uint64_t digest = runs.traces.front().batch_digest;
  for (const RunTrace& t : runs.traces) {
    if (t.batch_digest != digest) {
      pass = false;
      detail += "batch digests differ across operators; ";
    }
  }
  if (pass) detail += "batch digests identical across operators";
  report(7, "determinism of cmd_train", pass, detail);
}

// 8. masking statistics over >= 100k eligible tokens at 0.15
void criterion_masking() {
  CorpusSpec spec;
  spec.vocab_size = 64;
  spec.seq_len = 34;
  spec.seed = 20240601;
  const int n_sequences = 3200;  // 102400 eligible content tokens
  const Corpus corpus = generate_corpus(spec, n_sequences);
  std::vector<std::span<const int>> views;
  for (int i = 0; i < n_sequences; ++i) views.push_back(corpus.sequence(i));
  const MaskedBatch batch = mask_batch(views, spec.vocab_size, {0.15, false}, 8675309);

  std::size_t eligible = 0, selected = 0, masked = 0, randomized = 0;
  for (int i = 0; i < n_sequences; ++i) {
    const auto seq = corpus.sequence(i);
    for (int t = 0; t < spec.seq_len; ++t) {
      const std::size_t flat = static_cast<std::size_t>(i) * spec.seq_len + t;
      const int src = seq[static_cast<std::size_t>(t)];
      if (src < kFirstContentId) continue;
      ++eligible;
      if (batch.labels.data[flat] == -1) continue;
      ++selected;
      const int now = batch.input_ids.data[flat];
      if (now == kMaskId) {
        ++masked;
      } else if (now != src) {
        ++randomized;
      }
    }
  }
  const double sel = static_cast<double>(selected) / eligible;
  const double msk = static_cast<double>(masked) / selected;
  const double rnd = static_cast<double>(randomized) / selected;
  const bool pass = eligible >= 100000 && std::fabs(sel - 0.15) <= 0.005 &&
                    std::fabs(msk - 0.80) <= 0.02 && std::fabs(rnd - 0.10) <= 0.02;
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "%zu eligible: selected %.4f (0.15+-0.005), [MASK] %.4f (0.80+-0.02), random "
                "%.4f (0.10+-0.02)",
                eligible, sel, msk, rnd);
  report(8, "masking statistics", pass, detail);
}

}  // namespace

int main() {
  std::printf("acceptance suite, %s %s\n", kToolName, kToolVersion);
  criterion_table2();
  criterion_allocation();
  criterion_algebra();
  criterion_gradients();
  criterion_optimizer();
  const ToyRuns runs = criterion_toy_training();
  criterion_determinism(runs);
  criterion_masking();
  if (g_failures == 0) {
    std::printf("all acceptance criteria PASS\n");
    return 0;
  }
  std::printf("%d acceptance criteria FAILED\n", g_failures);
  return 1;
}
