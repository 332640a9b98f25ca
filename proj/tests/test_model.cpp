#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "attnlab/model.hpp"
#include "attnlab/verification.hpp"
#include "test_helpers.hpp"

using namespace attnlab;
using namespace attnlab::testing;

namespace {

MaskedBatch toy_batch(const ModelConfig& cfg, int batch, int seq, std::uint64_t seed) {
  Rng rng(seed);
  MaskedBatch b;
  b.input_ids = IntTensor::zeros({batch, seq});
  b.labels = IntTensor::full({batch, seq}, -1);
  b.attention_mask = IntTensor::full({batch, seq}, 1);
  for (auto& id : b.input_ids.data) {
    id = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size)));
  }
  for (std::size_t i = 0; i < b.labels.data.size(); i += 2) {
    b.labels.data[i] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size)));
  }
  return b;
}

}  // namespace

TEST_CASE("count_params reproduces the reference counts") {
  CHECK(count_params(ModelConfig::bert_small(OperatorKind::Original)) == 28795194);
  CHECK(count_params(ModelConfig::bert_small(OperatorKind::Symmetric)) == 27744570);
  CHECK(count_params(ModelConfig::bert_small(OperatorKind::Pairwise)) == 27875642);
  CHECK(count_params(ModelConfig::bert_base(OperatorKind::Original)) == 109514298);
  CHECK(count_params(ModelConfig::bert_base(OperatorKind::Symmetric)) == 102427194);
  CHECK(count_params(ModelConfig::bert_base(OperatorKind::Pairwise)) == 103017018);
}

TEST_CASE("relative savings render with two decimals") {
  CHECK(savings_percent(27744570, 28795194) == "3.65");
  CHECK(savings_percent(27875642, 28795194) == "3.19");
  CHECK(savings_percent(102427194, 109514298) == "6.47");
  CHECK(savings_percent(103017018, 109514298) == "5.93");
}

TEST_CASE("allocated scalars equal the closed-form count") {
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    EncoderModel toy = build_model(ModelConfig::toy(kind), 1);
    CHECK(toy.allocated_param_count() == count_params(toy.config));
    EncoderModel tiny = build_model(ModelConfig::tiny(kind), 1);
    CHECK(tiny.allocated_param_count() == count_params(tiny.config));
  }

  Rng rng(909);
  for (int i = 0; i < 10; ++i) {
    ModelConfig c;
    c.n_heads = 1 + static_cast<int>(rng.uniform_int(4));
    c.hidden = c.n_heads * static_cast<int>(2 + rng.uniform_int(10));
    c.vocab_size = 8 + static_cast<int>(rng.uniform_int(100));
    c.max_positions = 4 + static_cast<int>(rng.uniform_int(30));
    c.type_vocab_size = 1 + static_cast<int>(rng.uniform_int(3));
    c.n_layers = 1 + static_cast<int>(rng.uniform_int(3));
    c.intermediate = 8 + static_cast<int>(rng.uniform_int(60));
    c.tie_mlm_decoder = i % 3 != 0;
    c.operator_kind = static_cast<OperatorKind>(rng.uniform_int(3));
    EncoderModel m = build_model(c, rng.next_u64());
    CHECK(m.allocated_param_count() == count_params(c));
  }
}

TEST_CASE("swapping the operator changes only attention-internal counts") {
  for (auto make : {&ModelConfig::bert_small, &ModelConfig::bert_base, &ModelConfig::toy}) {
    const ModelConfig orig = make(OperatorKind::Original);
    for (OperatorKind kind : {OperatorKind::Symmetric, OperatorKind::Pairwise}) {
      const ModelConfig variant = make(kind);
      const std::int64_t attention_delta =
          attention_param_count(orig.hidden, orig.n_heads, OperatorKind::Original) -
          attention_param_count(variant.hidden, variant.n_heads, kind);
      CHECK(count_params(orig) - count_params(variant) == orig.n_layers * attention_delta);
    }
  }
}

TEST_CASE("build_model is deterministic and honors the init contract") {
  const ModelConfig cfg = ModelConfig::toy(OperatorKind::Pairwise);
  EncoderModel a = build_model(cfg, 7);
  EncoderModel b = build_model(cfg, 7);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(bit_identical(pa[i].tensor.values(), pb[i].tensor.values()));
  }

  EncoderModel c = build_model(cfg, 8);
  CHECK_FALSE(bit_identical(a.token_embedding.values(), c.token_embedding.values()));

  for (const NamedParam& p : pa) {
    if (p.name.ends_with("gamma")) {
      for (double v : p.tensor.values()) CHECK(v == 1.0);
    }
    if (p.name.ends_with("beta") || p.name.ends_with(".b") || p.name.ends_with("bias") ||
        p.name.find(".b_") != std::string::npos) {
      for (double v : p.tensor.values()) CHECK(v == 0.0);
    }
    if (p.name.ends_with("w_q")) {
      for (double v : p.tensor.values()) CHECK(std::fabs(v) <= 0.04);  // two-sigma clip
    }
  }
}

TEST_CASE("forward_mlm shape and finiteness") {
  ModelConfig cfg = ModelConfig::tiny(OperatorKind::Original);
  cfg.n_layers = 1;
  EncoderModel model = build_model(cfg, 3);
  MaskedBatch batch;
  batch.input_ids = IntTensor({1, 1}, {5});
  batch.labels = IntTensor({1, 1}, {5});
  batch.attention_mask = IntTensor({1, 1}, {1});
  Tensor logits = forward_mlm(model, batch);
  CHECK(logits.shape() == Shape{1, 1, cfg.vocab_size});
  for (double v : logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("untrained model scores near the uniform baseline") {
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    const ModelConfig cfg = ModelConfig::toy(kind);
    EncoderModel model = build_model(cfg, 11);
    const MaskedBatch batch = toy_batch(cfg, 4, 16, 99);
    const double loss = cross_entropy_masked(forward_mlm(model, batch), batch.labels).item();
    CHECK(std::fabs(loss - std::log(cfg.vocab_size)) <= 0.5);
  }
}

TEST_CASE("identical sequences in a batch produce identical logits") {
  const ModelConfig cfg = ModelConfig::tiny(OperatorKind::Pairwise);
  EncoderModel model = build_model(cfg, 21);
  MaskedBatch batch;
  batch.input_ids = IntTensor({2, 4}, {2, 7, 9, 3, 2, 7, 9, 3});
  batch.labels = IntTensor::full({2, 4}, -1);
  batch.labels.data[1] = 7;
  batch.labels.data[5] = 7;
  batch.attention_mask = IntTensor::full({2, 4}, 1);
  Tensor logits = forward_mlm(model, batch);
  const std::size_t half = logits.numel() / 2;
  CHECK(bit_identical(logits.values().subspan(0, half), logits.values().subspan(half)));
}

TEST_CASE("forward_mlm rejects out-of-range inputs") {
  const ModelConfig cfg = ModelConfig::tiny(OperatorKind::Original);
  EncoderModel model = build_model(cfg, 2);
  MaskedBatch batch;
  batch.input_ids = IntTensor({1, 2}, {5, cfg.vocab_size});
  batch.labels = IntTensor::full({1, 2}, -1);
  batch.labels.data[0] = 1;
  batch.attention_mask = IntTensor::full({1, 2}, 1);
  CHECK_THROWS_AS(forward_mlm(model, batch), std::out_of_range);

  MaskedBatch long_batch;
  long_batch.input_ids = IntTensor::zeros({1, cfg.max_positions + 1});
  long_batch.labels = IntTensor::full({1, cfg.max_positions + 1}, -1);
  long_batch.attention_mask = IntTensor::full({1, cfg.max_positions + 1}, 1);
  CHECK_THROWS_AS(forward_mlm(model, long_batch), std::out_of_range);
}

TEST_CASE("full-model gradients match finite differences on a one-layer model") {
  // hand-rolled check, independent of verification.cpp
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    ModelConfig cfg;
    cfg.vocab_size = 7;
    cfg.max_positions = 4;
    cfg.type_vocab_size = 2;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.hidden = 8;
    cfg.intermediate = 16;
    cfg.dropout = 0.0;
    cfg.operator_kind = kind;
    EncoderModel model = build_model(cfg, 5);

    MaskedBatch batch;
    batch.input_ids = IntTensor({1, 3}, {2, 1, 5});
    batch.labels = IntTensor({1, 3}, {-1, 6, 4});
    batch.attention_mask = IntTensor::full({1, 3}, 1);

    auto loss_value = [&]() {
      NoGradGuard no_grad;
      return cross_entropy_masked(forward_mlm(model, batch), batch.labels).item();
    };
    auto params = model.parameters();
    for (NamedParam& p : params) p.tensor.zero_grad();
    backward(cross_entropy_masked(forward_mlm(model, batch), batch.labels));

    // Plain double-precision central differences carry O(h^2) estimator
    // bias and ~1e-12 rounding noise, so the relative bound applies where
    // the gradient dominates both and a tight absolute bound covers the
    // near-zero rest.
    double worst_rel = 0.0;
    double worst_abs_small = 0.0;
    for (NamedParam& p : params) {
      const auto analytic = p.tensor.grad();
      auto values = p.tensor.values_mut();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + 1e-4;
        const double up = loss_value();
        values[i] = saved - 1e-4;
        const double down = loss_value();
        values[i] = saved;
        const double fd = (up - down) / 2e-4;
        const double mag = std::max(std::fabs(analytic[i]), std::fabs(fd));
        if (mag >= 1e-6) {
          worst_rel = std::max(worst_rel, std::fabs(analytic[i] - fd) / mag);
        } else {
          worst_abs_small = std::max(worst_abs_small, std::fabs(analytic[i] - fd));
        }
      }
    }
    INFO("operator ", to_string(kind));
    CHECK(worst_rel <= 5e-4);
    CHECK(worst_abs_small <= 1e-9);
  }
}

TEST_CASE("the strict every-coordinate gradient check passes on the tiny model") {
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    EncoderModel model = build_model(ModelConfig::tiny(kind), 5);
    MaskedBatch batch;
    batch.input_ids = IntTensor({1, 4}, {2, 1, 6, 3});
    batch.labels = IntTensor({1, 4}, {-1, 7, 10, -1});
    batch.attention_mask = IntTensor::full({1, 4}, 1);
    INFO("operator ", to_string(kind));
    CHECK(model_grad_max_rel_error(model, batch) <= 1e-4);
  }
}

TEST_CASE("forward_mlm agrees with the straight-line reference forward") {
  for (OperatorKind kind :
       {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise}) {
    EncoderModel model = build_model(ModelConfig::tiny(kind), 31);
    MaskedBatch batch;
    batch.input_ids = IntTensor({2, 4}, {2, 1, 6, 3, 2, 9, 1, 3});
    batch.labels = IntTensor({2, 4}, {-1, 7, -1, -1, -1, -1, 4, -1});
    batch.attention_mask = IntTensor::full({2, 4}, 1);
    const double product =
        cross_entropy_masked(forward_mlm(model, batch), batch.labels).item();
    const double reference = static_cast<double>(reference_mlm_loss(model, batch));
    INFO("operator ", to_string(kind));
    CHECK(std::fabs(product - reference) <= 1e-10);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto path = std::filesystem::temp_directory_path() / "attnlab_ckpt_test.bin";
  ModelConfig cfg = ModelConfig::tiny(OperatorKind::Pairwise);
  cfg.dropout = 0.07;
  EncoderModel model = build_model(cfg, 77);
  save_checkpoint(path, model);
  EncoderModel loaded = load_checkpoint(path);

  CHECK(loaded.config.vocab_size == cfg.vocab_size);
  CHECK(loaded.config.operator_kind == cfg.operator_kind);
  CHECK(loaded.config.dropout == cfg.dropout);
  CHECK(loaded.config.ln_eps == cfg.ln_eps);

  const auto pa = model.parameters();
  const auto pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(bit_identical(pa[i].tensor.values(), pb[i].tensor.values()));
  }
  std::filesystem::remove(path);
}

TEST_CASE("config validation") {
  ModelConfig bad = ModelConfig::tiny(OperatorKind::Original);
  bad.n_heads = 3;  // does not divide hidden=16
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ModelConfig::tiny(OperatorKind::Original);
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
