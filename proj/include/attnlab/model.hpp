#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attnlab/attention.hpp"
#include "attnlab/data.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

// Architecture hyperparameters. Parameter counts and model instances both
// derive from this, so the two can be cross-checked exactly.
struct ModelConfig {
  int vocab_size = 30522;
  int max_positions = 512;
  int type_vocab_size = 2;
  int n_layers = 12;
  int n_heads = 12;
  int hidden = 768;
  int intermediate = 3072;
  OperatorKind operator_kind = OperatorKind::Original;
  double ln_eps = 1e-12;
  double dropout = 0.1;
  bool tie_mlm_decoder = true;

  void validate() const;  // throws std::invalid_argument

  static ModelConfig bert_small(OperatorKind kind);
  static ModelConfig bert_base(OperatorKind kind);
  // Desk-scale recipe used by the training smoke runs.
  static ModelConfig toy(OperatorKind kind);
  // Smallest config that still exercises every code path; used by the
  // full-model gradient checks.
  static ModelConfig tiny(OperatorKind kind);
};

// Closed-form whole-model parameter count:
//   embeddings  vocab*h + max_pos*h + type_vocab*h + 2h
//   per layer   attention_param_count + (h^2+h) output proj + 2h
//               + (h*i + i) + (i*h + h) + 2h
//   MLM head    (h^2+h) transform + 2h + vocab bias (+ vocab*h when untied)
std::int64_t count_params(const ModelConfig& config);

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool weight_decay;  // false for biases and layer-norm parameters
};

struct EncoderLayer {
  AttentionParams attention;
  Tensor attn_ln_gamma, attn_ln_beta;
  Tensor inter_w, inter_b;    // hidden x intermediate
  Tensor output_w, output_b;  // intermediate x hidden
  Tensor out_ln_gamma, out_ln_beta;
};

struct EncoderModel {
  ModelConfig config;

  Tensor token_embedding;     // vocab x hidden; doubles as the MLM decoder when tied
  Tensor position_embedding;  // max_positions x hidden
  Tensor type_embedding;      // type_vocab x hidden
  Tensor emb_ln_gamma, emb_ln_beta;

  std::vector<EncoderLayer> layers;

  Tensor mlm_transform_w, mlm_transform_b;
  Tensor mlm_ln_gamma, mlm_ln_beta;
  Tensor mlm_decoder_w;     // only when config.tie_mlm_decoder is false
  Tensor mlm_decoder_bias;  // vocab

  // Every trainable tensor exactly once, in the fixed order used for
  // initialization, optimizer state and checkpoints.
  std::vector<NamedParam> parameters() const;
  std::int64_t allocated_param_count() const;
};

// Weights N(0, 0.02^2) truncated at two sigma, biases and layer-norm beta
// zero, gamma one. Deterministic per (config, seed).
EncoderModel build_model(const ModelConfig& config, std::uint64_t seed);

// Token + position + type embeddings, embedding layer norm, dropout,
// n_layers transformer blocks, MLM transform and tied-decoder logits.
// Pass a dropout rng for training mode; nullptr disables dropout.
Tensor forward_mlm(const EncoderModel& model, const MaskedBatch& batch,
                   Rng* dropout_rng = nullptr);

// Flat binary container: config plus name -> shape -> little-endian double
// values for every parameter. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model);
EncoderModel load_checkpoint(const std::filesystem::path& path);

}  // namespace attnlab
