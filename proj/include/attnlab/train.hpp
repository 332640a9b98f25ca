#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnlab/data.hpp"
#include "attnlab/model.hpp"

namespace attnlab {

// Optimization recipe: AdamW with a linear warmup / linear decay schedule.
// Defaults are the desk-scale toy recipe. BERT-scale pre-training runs peak
// 1e-4 over hundreds of thousands of steps; a 600-step desk run barely
// moves at that rate, so the toy default raises the peak to 3e-3 and keeps
// the schedule shape (warmup 5% of steps, linear decay to zero).
struct TrainConfig {
  int steps = 600;
  int batch_size = 32;
  double peak_lr = 3e-3;
  int warmup_steps = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-12;
  double weight_decay = 0.01;
  double mask_prob = 0.15;
  // replace every selected token with [MASK] instead of the 80/10/10 split
  bool mask_token_only = false;
  int eval_every = 50;
  int eval_batches = 8;
  std::uint64_t seed = 42;

  void validate() const;
};

// Linear ramp 0 -> peak_lr over [0, warmup_steps], then linear decay back to
// 0 over [warmup_steps, steps]. Throws outside [0, steps].
double lr_at(int step, const TrainConfig& config);

// Adam with decoupled weight decay. Decay applies at learning-rate scale
// directly to the weights; biases and layer-norm parameters are exempt via
// NamedParam::weight_decay.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, const TrainConfig& config);

  void zero_grad();
  // Bias-corrected moment update; throws if any parameter grad is missing.
  void step(double lr);
  int step_count() const { return step_count_; }

 private:
  struct Slot {
    NamedParam param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_;
  int step_count_ = 0;
};

struct TraceRecord {
  int step;
  double train_loss;  // nan for the pre-training record at step 0
  double eval_loss;
  double lr;
};

// One training run: eval-loss records plus everything needed to check that
// two runs are comparable. wall_clock_sec is informational and is not part
// of the CSV serialization.
struct RunTrace {
  ModelConfig model_config;
  TrainConfig train_config;
  CorpusSpec corpus_spec;
  int corpus_sequences = 0;
  std::uint64_t batch_digest = 0;
  std::vector<TraceRecord> records;
  double wall_clock_sec = 0.0;
};

// Runs the MLM loop: per step, a batch sampled and masked deterministically
// from (seed, step), forward, loss, backward, AdamW update at lr_at(step).
// Every eval_every steps (and at steps 0 and `steps`) the held-out slice is
// evaluated with dropout disabled. Non-finite loss aborts with the step
// named in the diagnostic.
RunTrace train(EncoderModel& model, const Corpus& corpus, const TrainConfig& config);

// First recorded step at which (initial - loss) >= fraction * (initial -
// final). nullopt when the trace never improves.
std::optional<int> steps_to_fraction(const RunTrace& trace, double fraction);

// First recorded step with eval_loss < initial - drop.
std::optional<int> plateau_exit_step(const RunTrace& trace, double drop = 0.05);

// CSV with a '# key=value' metadata preamble and rows
// step,train_loss,eval_loss,lr at 10 significant digits. Parsing the text
// and re-serializing reproduces it byte for byte.
std::string trace_to_csv(const RunTrace& trace);
RunTrace trace_from_csv(const std::string& text);

}  // namespace attnlab
