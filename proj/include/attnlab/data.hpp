#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "attnlab/rng.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

// Reserved token ids; content tokens occupy [kFirstContentId, vocab_size).
inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kFirstContentId = 4;

// Recipe for a synthetic corpus: sequences sampled from a fixed random
// Markov chain over the content tokens. Lower transition_temperature means
// sharper rows, a lower entropy floor and an easier prediction task. The
// default 0.005 gives the toy recipe a floor around 0.9 nats, deep enough
// that a few hundred optimizer steps show a clear convergence signal.
struct CorpusSpec {
  int vocab_size = 64;
  int seq_len = 32;
  int markov_order = 1;  // 1 or 2
  double transition_temperature = 0.005;
  std::uint64_t seed = 0;

  int content_tokens() const { return vocab_size - kFirstContentId; }
  void validate() const;  // throws std::invalid_argument
};

// The chain itself: transition rows drawn once from the spec seed, tempered
// and renormalized. Contexts are the last markov_order tokens, flattened
// row-major into a single index.
class MarkovChain {
 public:
  explicit MarkovChain(const CorpusSpec& spec);

  int states() const { return states_; }
  int contexts() const { return contexts_; }
  std::span<const double> row(int context) const;

  // Stationary distribution over contexts (power iteration; the tempered
  // rows are strictly positive, so it is unique).
  const std::vector<double>& stationary_contexts() const { return stationary_; }
  // Marginal over tokens, as content-token offsets in [0, states).
  std::vector<double> stationary_tokens() const;

  // H(X_t | context) in nats: sum_ctx pi(ctx) H(row_ctx).
  double conditional_entropy() const;

  int sample_context(Rng& rng) const;             // from the stationary law
  int sample_next(int context, Rng& rng) const;   // content-token offset
  int shift_context(int context, int next) const;

 private:
  int order_;
  int states_;
  int contexts_;
  std::vector<double> rows_;        // contexts x states
  std::vector<double> stationary_;  // contexts
};

// Token store; sequences are fixed-length rows [CLS] content... [SEP].
struct Corpus {
  CorpusSpec spec;
  int n_sequences = 0;
  std::vector<int> tokens;  // n_sequences * seq_len

  std::span<const int> sequence(int i) const;
  void save(const std::filesystem::path& path) const;
  static Corpus load(const std::filesystem::path& path);
};

Corpus generate_corpus(const CorpusSpec& spec, int n_sequences);

// One MLM training batch. labels hold the original id at positions chosen
// by the masking procedure and -1 everywhere else.
struct MaskedBatch {
  IntTensor input_ids;       // B x L
  IntTensor labels;          // B x L
  IntTensor attention_mask;  // B x L, 0/1
};

struct MaskingOptions {
  double mask_prob = 0.15;
  // Replace every selected token with [MASK] instead of the 80/10/10
  // mask/random/keep split.
  bool mask_token_only = false;
};

// Each non-special token is selected independently with probability
// mask_prob; of the selected, 80% become [MASK], 10% a uniform random
// content token, 10% stay unchanged. Special tokens are never selected.
MaskedBatch mask_batch(const std::vector<std::span<const int>>& sequences, int vocab_size,
                       const MaskingOptions& options, std::uint64_t seed);

// Conditional entropy of the generating chain in nats: the floor no MLM
// model on this corpus can beat when masked tokens must be inferred from
// context. A proxy at order 1 since bidirectional context narrows it
// further; still the right scale for judging convergence.
double theoretical_floor(const CorpusSpec& spec);

}  // namespace attnlab
