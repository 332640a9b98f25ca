#include "attnlab/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace attnlab {

void ModelConfig::validate() const {
  if (vocab_size < 1 || max_positions < 1 || type_vocab_size < 1 || n_layers < 1 ||
      n_heads < 1 || hidden < 1 || intermediate < 1) {
    throw std::invalid_argument("ModelConfig: all size fields must be positive");
  }
  if (hidden % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: heads " + std::to_string(n_heads) +
                                " must divide hidden " + std::to_string(hidden));
  }
  if (ln_eps <= 0.0) throw std::invalid_argument("ModelConfig: ln_eps must be positive");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("ModelConfig: dropout must lie in [0, 1)");
  }
}

ModelConfig ModelConfig::bert_small(OperatorKind kind) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 8;
  c.hidden = 512;
  c.intermediate = 2048;
  c.operator_kind = kind;
  return c;
}

ModelConfig ModelConfig::bert_base(OperatorKind kind) {
  ModelConfig c;
  c.operator_kind = kind;
  return c;
}

ModelConfig ModelConfig::toy(OperatorKind kind) {
  ModelConfig c;
  c.vocab_size = 64;
  c.max_positions = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.hidden = 64;
  c.intermediate = 256;
  c.operator_kind = kind;
  return c;
}

ModelConfig ModelConfig::tiny(OperatorKind kind) {
  ModelConfig c;
  c.vocab_size = 11;
  c.max_positions = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.hidden = 16;
  c.intermediate = 32;
  c.operator_kind = kind;
  c.dropout = 0.0;
  return c;
}

std::int64_t count_params(const ModelConfig& config) {
  config.validate();
  const std::int64_t v = config.vocab_size;
  const std::int64_t h = config.hidden;
  const std::int64_t i = config.intermediate;
  const std::int64_t embeddings =
      v * h + static_cast<std::int64_t>(config.max_positions) * h +
      static_cast<std::int64_t>(config.type_vocab_size) * h + 2 * h;
  const std::int64_t per_layer =
      attention_param_count(config.hidden, config.n_heads, config.operator_kind) +
      (h * h + h) +        // output projection
      2 * h +              // attention layer norm
      (h * i + i) +        // intermediate dense
      (i * h + h) +        // output dense
      2 * h;               // output layer norm
  std::int64_t mlm_head = (h * h + h) + 2 * h + v;
  if (!config.tie_mlm_decoder) mlm_head += v * h;
  return embeddings + config.n_layers * per_layer + mlm_head;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kStreamInit = 0x696e6974;

Tensor param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor param_ones(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

AttentionParams alloc_attention(int hidden, int n_heads, OperatorKind kind) {
  AttentionParams p;
  p.hidden = hidden;
  p.n_heads = n_heads;
  p.kind = kind;
  p.w_q = param({hidden, hidden});
  p.b_q = param({hidden});
  if (kind == OperatorKind::Original) {
    p.w_k = param({hidden, hidden});
    p.b_k = param({hidden});
  }
  if (kind == OperatorKind::Pairwise) {
    const int d = hidden / n_heads;
    for (int i = 0; i < n_heads; ++i) p.s_heads.push_back(param({d, d}));
  }
  p.w_v = param({hidden, hidden});
  p.b_v = param({hidden});
  p.w_o = param({hidden, hidden});
  p.b_o = param({hidden});
  return p;
}

EncoderModel allocate_model(const ModelConfig& config) {
  config.validate();
  EncoderModel m;
  m.config = config;
  m.token_embedding = param({config.vocab_size, config.hidden});
  m.position_embedding = param({config.max_positions, config.hidden});
  m.type_embedding = param({config.type_vocab_size, config.hidden});
  m.emb_ln_gamma = param_ones({config.hidden});
  m.emb_ln_beta = param({config.hidden});
  for (int l = 0; l < config.n_layers; ++l) {
    EncoderLayer layer;
    layer.attention = alloc_attention(config.hidden, config.n_heads, config.operator_kind);
    layer.attn_ln_gamma = param_ones({config.hidden});
    layer.attn_ln_beta = param({config.hidden});
    layer.inter_w = param({config.hidden, config.intermediate});
    layer.inter_b = param({config.intermediate});
    layer.output_w = param({config.intermediate, config.hidden});
    layer.output_b = param({config.hidden});
    layer.out_ln_gamma = param_ones({config.hidden});
    layer.out_ln_beta = param({config.hidden});
    m.layers.push_back(std::move(layer));
  }
  m.mlm_transform_w = param({config.hidden, config.hidden});
  m.mlm_transform_b = param({config.hidden});
  m.mlm_ln_gamma = param_ones({config.hidden});
  m.mlm_ln_beta = param({config.hidden});
  if (!config.tie_mlm_decoder) m.mlm_decoder_w = param({config.hidden, config.vocab_size});
  m.mlm_decoder_bias = param({config.vocab_size});
  return m;
}

}  // namespace

EncoderModel build_model(const ModelConfig& config, std::uint64_t seed) {
  EncoderModel m = allocate_model(config);
  Rng rng(mix_seed(seed, kStreamInit));
  auto fill = [&](Tensor& t) {
    for (double& v : t.values_mut()) v = rng.truncated_normal(0.02, 2.0);
  };
  // Weight tensors draw in parameter order; biases stay zero, gammas one.
  fill(m.token_embedding);
  fill(m.position_embedding);
  fill(m.type_embedding);
  for (EncoderLayer& layer : m.layers) {
    fill(layer.attention.w_q);
    if (layer.attention.w_k.defined()) fill(layer.attention.w_k);
    for (Tensor& s : layer.attention.s_heads) fill(s);
    fill(layer.attention.w_v);
    fill(layer.attention.w_o);
    fill(layer.inter_w);
    fill(layer.output_w);
  }
  fill(m.mlm_transform_w);
  if (m.mlm_decoder_w.defined()) fill(m.mlm_decoder_w);
  return m;
}

std::vector<NamedParam> EncoderModel::parameters() const {
  std::vector<NamedParam> out;
  auto push = [&](std::string name, const Tensor& t, bool decay) {
    out.push_back({std::move(name), t, decay});
  };
  push("embeddings.token", token_embedding, true);
  push("embeddings.position", position_embedding, true);
  push("embeddings.token_type", type_embedding, true);
  push("embeddings.ln.gamma", emb_ln_gamma, false);
  push("embeddings.ln.beta", emb_ln_beta, false);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const EncoderLayer& layer = layers[l];
    const std::string prefix = "layer." + std::to_string(l) + ".";
    push(prefix + "attention.w_q", layer.attention.w_q, true);
    push(prefix + "attention.b_q", layer.attention.b_q, false);
    if (layer.attention.w_k.defined()) {
      push(prefix + "attention.w_k", layer.attention.w_k, true);
      push(prefix + "attention.b_k", layer.attention.b_k, false);
    }
    for (std::size_t i = 0; i < layer.attention.s_heads.size(); ++i) {
      push(prefix + "attention.s." + std::to_string(i), layer.attention.s_heads[i], true);
    }
    push(prefix + "attention.w_v", layer.attention.w_v, true);
    push(prefix + "attention.b_v", layer.attention.b_v, false);
    push(prefix + "attention.w_o", layer.attention.w_o, true);
    push(prefix + "attention.b_o", layer.attention.b_o, false);
    push(prefix + "attention.ln.gamma", layer.attn_ln_gamma, false);
    push(prefix + "attention.ln.beta", layer.attn_ln_beta, false);
    push(prefix + "intermediate.w", layer.inter_w, true);
    push(prefix + "intermediate.b", layer.inter_b, false);
    push(prefix + "output.w", layer.output_w, true);
    push(prefix + "output.b", layer.output_b, false);
    push(prefix + "output.ln.gamma", layer.out_ln_gamma, false);
    push(prefix + "output.ln.beta", layer.out_ln_beta, false);
  }
  push("mlm.transform.w", mlm_transform_w, true);
  push("mlm.transform.b", mlm_transform_b, false);
  push("mlm.ln.gamma", mlm_ln_gamma, false);
  push("mlm.ln.beta", mlm_ln_beta, false);
  if (mlm_decoder_w.defined()) push("mlm.decoder.w", mlm_decoder_w, true);
  push("mlm.decoder.bias", mlm_decoder_bias, false);
  return out;
}

std::int64_t EncoderModel::allocated_param_count() const {
  std::int64_t total = 0;
  for (const NamedParam& p : parameters()) total += static_cast<std::int64_t>(p.tensor.numel());
  return total;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Tensor forward_mlm(const EncoderModel& model, const MaskedBatch& batch, Rng* dropout_rng) {
  const ModelConfig& cfg = model.config;
  if (batch.input_ids.shape.size() != 2) {
    throw std::invalid_argument("forward_mlm: input_ids must be [B x L], got " +
                                shape_str(batch.input_ids.shape));
  }
  const int seq_len = batch.input_ids.dim(1);
  if (seq_len > cfg.max_positions) {
    throw std::out_of_range("forward_mlm: sequence length " + std::to_string(seq_len) +
                            " exceeds max_positions " + std::to_string(cfg.max_positions));
  }
  if (batch.attention_mask.shape != batch.input_ids.shape) {
    throw std::invalid_argument("forward_mlm: attention_mask must match input_ids shape");
  }

  IntTensor positions = IntTensor::zeros(batch.input_ids.shape);
  for (std::size_t i = 0; i < positions.numel(); ++i) {
    positions.data[i] = static_cast<int>(i % static_cast<std::size_t>(seq_len));
  }
  IntTensor types = IntTensor::zeros(batch.input_ids.shape);  // single-segment MLM

  Tensor x = add(add(embedding_rows(model.token_embedding, batch.input_ids),
                     embedding_rows(model.position_embedding, positions)),
                 embedding_rows(model.type_embedding, types));
  x = layer_norm(x, model.emb_ln_gamma, model.emb_ln_beta, cfg.ln_eps);
  if (dropout_rng != nullptr && cfg.dropout > 0.0) x = dropout(x, cfg.dropout, *dropout_rng);

  for (const EncoderLayer& layer : model.layers) {
    Tensor attn =
        attention_forward(x, layer.attention, cfg.operator_kind, batch.attention_mask);
    x = layer_norm(add(x, attn), layer.attn_ln_gamma, layer.attn_ln_beta, cfg.ln_eps);
    Tensor ffn = add_bias(
        matmul(gelu(add_bias(matmul(x, layer.inter_w), layer.inter_b)), layer.output_w),
        layer.output_b);
    x = layer_norm(add(x, ffn), layer.out_ln_gamma, layer.out_ln_beta, cfg.ln_eps);
  }

  Tensor t = layer_norm(gelu(add_bias(matmul(x, model.mlm_transform_w), model.mlm_transform_b)),
                        model.mlm_ln_gamma, model.mlm_ln_beta, cfg.ln_eps);
  Tensor logits = cfg.tie_mlm_decoder ? matmul_nt(t, model.token_embedding)
                                      : matmul(t, model.mlm_decoder_w);
  return add_bias(logits, model.mlm_decoder_bias);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'A', 'T', 'L', 'C', 'K', 'P', 'T', '1'};

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions},
          {"type_vocab_size", c.type_vocab_size},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"hidden", c.hidden},
          {"intermediate", c.intermediate},
          {"operator", to_string(c.operator_kind)},
          {"ln_eps", c.ln_eps},
          {"dropout", c.dropout},
          {"tie_mlm_decoder", c.tie_mlm_decoder}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.type_vocab_size = j.at("type_vocab_size").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.intermediate = j.at("intermediate").get<int>();
  const auto kind = operator_kind_from_string(j.at("operator").get<std::string>());
  if (!kind) {
    throw std::runtime_error("checkpoint: unknown operator '" +
                             j.at("operator").get<std::string>() + "'");
  }
  c.operator_kind = *kind;
  c.ln_eps = j.at("ln_eps").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.tie_mlm_decoder = j.at("tie_mlm_decoder").get<bool>();
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoints are little-endian; big-endian hosts are unsupported");
  const auto params = model.parameters();
  nlohmann::json header;
  header["config"] = config_to_json(model.config);
  nlohmann::json entries = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const NamedParam& p : params) {
    entries.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"offset", offset},
                       {"count", static_cast<std::int64_t>(p.tensor.numel())}});
    offset += static_cast<std::int64_t>(p.tensor.numel());
  }
  header["params"] = std::move(entries);
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const NamedParam& p : params) {
    const auto v = p.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

EncoderModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != 1) {
    throw std::runtime_error("checkpoint: unsupported version in " + path.string());
  }
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path.string());
  const nlohmann::json header = nlohmann::json::parse(header_text);

  EncoderModel model = allocate_model(config_from_json(header.at("config")));
  auto params = model.parameters();
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& entry : header.at("params")) {
    by_name[entry.at("name").get<std::string>()] = &entry;
  }
  if (by_name.size() != params.size()) {
    throw std::runtime_error("checkpoint: parameter table size mismatch in " + path.string());
  }
  // Entries are stored in parameter order; read sequentially and verify.
  for (NamedParam& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
    }
    const Shape shape = it->second->at("shape").get<Shape>();
    if (shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + p.name + "': file " +
                               shape_str(shape) + " vs model " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.values_mut();
    in.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated data for '" + p.name + "'");
  }
  return model;
}

}  // namespace attnlab
