#include "attnlab/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace attnlab {

namespace {
// rng stream tags
constexpr std::uint64_t kStreamChain = 0x636861696e;   // transition matrix
constexpr std::uint64_t kStreamTokens = 0x746f6b656e;  // sequence sampling
}  // namespace

void CorpusSpec::validate() const {
  if (vocab_size < 8) {
    throw std::invalid_argument("CorpusSpec: vocab_size must be at least 8, got " +
                                std::to_string(vocab_size));
  }
  if (markov_order != 1 && markov_order != 2) {
    throw std::invalid_argument("CorpusSpec: markov_order must be 1 or 2, got " +
                                std::to_string(markov_order));
  }
  if (transition_temperature <= 0.0) {
    throw std::invalid_argument("CorpusSpec: transition_temperature must be positive");
  }
  if (seq_len < markov_order + 2) {
    throw std::invalid_argument("CorpusSpec: seq_len " + std::to_string(seq_len) +
                                " leaves no room for [CLS] content [SEP]");
  }
}

// ---------------------------------------------------------------------------
// MarkovChain
// ---------------------------------------------------------------------------

MarkovChain::MarkovChain(const CorpusSpec& spec) {
  spec.validate();
  order_ = spec.markov_order;
  states_ = spec.content_tokens();
  contexts_ = order_ == 1 ? states_ : states_ * states_;
  rows_.resize(static_cast<std::size_t>(contexts_) * states_);

  Rng rng(mix_seed(spec.seed, kStreamChain));
  for (int c = 0; c < contexts_; ++c) {
    double* row = rows_.data() + static_cast<std::size_t>(c) * states_;
    double mx = -1.0;
    for (int j = 0; j < states_; ++j) {
      row[j] = rng.uniform();
      mx = std::max(mx, row[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < states_; ++j) {
      row[j] = std::exp((row[j] - mx) / spec.transition_temperature);
      denom += row[j];
    }
    for (int j = 0; j < states_; ++j) row[j] /= denom;
  }

  // Power iteration over contexts. Rows are strictly positive, so the
  // iteration contracts to the unique stationary distribution.
  stationary_.assign(static_cast<std::size_t>(contexts_), 1.0 / contexts_);
  std::vector<double> next(stationary_.size());
  for (int iter = 0; iter < 20000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int c = 0; c < contexts_; ++c) {
      const double mass = stationary_[static_cast<std::size_t>(c)];
      if (mass == 0.0) continue;
      const double* row = rows_.data() + static_cast<std::size_t>(c) * states_;
      for (int j = 0; j < states_; ++j) {
        next[static_cast<std::size_t>(shift_context(c, j))] += mass * row[j];
      }
    }
    double drift = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) drift += std::fabs(next[i] - stationary_[i]);
    stationary_.swap(next);
    if (drift < 1e-15) break;
  }
}

std::span<const double> MarkovChain::row(int context) const {
  if (context < 0 || context >= contexts_) {
    throw std::out_of_range("MarkovChain: context " + std::to_string(context) + " out of range");
  }
  return {rows_.data() + static_cast<std::size_t>(context) * states_,
          static_cast<std::size_t>(states_)};
}

int MarkovChain::shift_context(int context, int next) const {
  return order_ == 1 ? next : (context % states_) * states_ + next;
}

std::vector<double> MarkovChain::stationary_tokens() const {
  if (order_ == 1) return stationary_;
  std::vector<double> marginal(static_cast<std::size_t>(states_), 0.0);
  for (int c = 0; c < contexts_; ++c) {
    marginal[static_cast<std::size_t>(c % states_)] += stationary_[static_cast<std::size_t>(c)];
  }
  return marginal;
}

double MarkovChain::conditional_entropy() const {
  double total = 0.0;
  for (int c = 0; c < contexts_; ++c) {
    const double* row = rows_.data() + static_cast<std::size_t>(c) * states_;
    double h = 0.0;
    for (int j = 0; j < states_; ++j) {
      if (row[j] > 0.0) h -= row[j] * std::log(row[j]);
    }
    total += stationary_[static_cast<std::size_t>(c)] * h;
  }
  return total;
}

namespace {
int sample_discrete(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;  // guard rounding at u ~ 1
}
}  // namespace

int MarkovChain::sample_context(Rng& rng) const { return sample_discrete(stationary_, rng); }

int MarkovChain::sample_next(int context, Rng& rng) const {
  return sample_discrete(row(context), rng);
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

Corpus generate_corpus(const CorpusSpec& spec, int n_sequences) {
  spec.validate();
  if (n_sequences < 1) {
    throw std::invalid_argument("generate_corpus: n_sequences must be at least 1");
  }
  const MarkovChain chain(spec);
  Corpus corpus;
  corpus.spec = spec;
  corpus.n_sequences = n_sequences;
  corpus.tokens.reserve(static_cast<std::size_t>(n_sequences) * spec.seq_len);

  Rng rng(mix_seed(spec.seed, kStreamTokens));
  const int content_len = spec.seq_len - 2;
  for (int s = 0; s < n_sequences; ++s) {
    corpus.tokens.push_back(kClsId);
    // Starting context drawn from the stationary law keeps every position
    // stationary-distributed, so frequency checks need no burn-in.
    int context = chain.sample_context(rng);
    int emitted = 0;
    if (spec.markov_order == 2) {
      corpus.tokens.push_back(kFirstContentId + context / chain.states());
      corpus.tokens.push_back(kFirstContentId + context % chain.states());
      emitted = 2;
    } else {
      corpus.tokens.push_back(kFirstContentId + context);
      emitted = 1;
    }
    for (; emitted < content_len; ++emitted) {
      const int next = chain.sample_next(context, rng);
      corpus.tokens.push_back(kFirstContentId + next);
      context = chain.shift_context(context, next);
    }
    corpus.tokens.push_back(kSepId);
  }
  return corpus;
}

std::span<const int> Corpus::sequence(int i) const {
  if (i < 0 || i >= n_sequences) {
    throw std::out_of_range("Corpus: sequence " + std::to_string(i) + " of " +
                            std::to_string(n_sequences));
  }
  return {tokens.data() + static_cast<std::size_t>(i) * spec.seq_len,
          static_cast<std::size_t>(spec.seq_len)};
}

namespace {

constexpr char kCorpusMagic[8] = {'A', 'T', 'L', 'C', 'O', 'R', 'P', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
  static_assert(std::endian::native == std::endian::little,
                "corpus files are little-endian; big-endian hosts are unsupported");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("corpus file: truncated read");
  return value;
}

}  // namespace

void Corpus::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("corpus file: cannot open " + path.string() + " for writing");
  out.write(kCorpusMagic, sizeof(kCorpusMagic));
  write_pod(out, std::uint32_t{1});
  write_pod(out, std::int32_t{spec.vocab_size});
  write_pod(out, std::int32_t{spec.seq_len});
  write_pod(out, std::int32_t{spec.markov_order});
  write_pod(out, spec.transition_temperature);
  write_pod(out, spec.seed);
  write_pod(out, std::int64_t{n_sequences});
  for (int t : tokens) write_pod(out, std::int32_t{t});
  if (!out) throw std::runtime_error("corpus file: write failed for " + path.string());
}

Corpus Corpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus file: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCorpusMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("corpus file: bad magic in " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != 1) {
    throw std::runtime_error("corpus file: unsupported version " + std::to_string(version));
  }
  Corpus corpus;
  corpus.spec.vocab_size = read_pod<std::int32_t>(in);
  corpus.spec.seq_len = read_pod<std::int32_t>(in);
  corpus.spec.markov_order = read_pod<std::int32_t>(in);
  corpus.spec.transition_temperature = read_pod<double>(in);
  corpus.spec.seed = read_pod<std::uint64_t>(in);
  corpus.n_sequences = static_cast<int>(read_pod<std::int64_t>(in));
  corpus.tokens.resize(static_cast<std::size_t>(corpus.n_sequences) * corpus.spec.seq_len);
  for (int& t : corpus.tokens) t = read_pod<std::int32_t>(in);
  return corpus;
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

MaskedBatch mask_batch(const std::vector<std::span<const int>>& sequences, int vocab_size,
                       const MaskingOptions& options, std::uint64_t seed) {
  if (options.mask_prob < 0.0 || options.mask_prob >= 1.0) {
    throw std::invalid_argument("mask_batch: mask_prob must lie in [0, 1)");
  }
  if (sequences.empty()) throw std::invalid_argument("mask_batch: empty batch");
  if (vocab_size <= kFirstContentId) {
    throw std::invalid_argument("mask_batch: vocab_size leaves no content tokens");
  }
  const int batch = static_cast<int>(sequences.size());
  const int seq_len = static_cast<int>(sequences.front().size());
  for (const auto& s : sequences) {
    if (static_cast<int>(s.size()) != seq_len) {
      throw std::invalid_argument("mask_batch: ragged batch; all sequences must share a length");
    }
  }

  MaskedBatch out;
  out.input_ids = IntTensor::zeros({batch, seq_len});
  out.labels = IntTensor::full({batch, seq_len}, -1);
  out.attention_mask = IntTensor::zeros({batch, seq_len});

  Rng rng(seed);
  const int content_range = vocab_size - kFirstContentId;
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq_len; ++t) {
      const int src = sequences[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
      const std::size_t flat = static_cast<std::size_t>(b) * seq_len + t;
      out.input_ids.data[flat] = src;
      out.attention_mask.data[flat] = src == kPadId ? 0 : 1;
      if (src < kFirstContentId) continue;  // special tokens are never selected
      if (rng.uniform() >= options.mask_prob) continue;
      out.labels.data[flat] = src;
      if (options.mask_token_only) {
        out.input_ids.data[flat] = kMaskId;
        continue;
      }
      const double split = rng.uniform();
      if (split < 0.8) {
        out.input_ids.data[flat] = kMaskId;
      } else if (split < 0.9) {
        out.input_ids.data[flat] =
            kFirstContentId + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content_range)));
      }  // else: keep the original token, label still set
    }
  }
  return out;
}

double theoretical_floor(const CorpusSpec& spec) {
  return MarkovChain(spec).conditional_entropy();
}

}  // namespace attnlab
