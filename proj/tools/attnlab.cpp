#include <CLI11.hpp>
#include <iostream>

#include "attnlab/commands.hpp"

using namespace attnlab;

namespace {

void add_model_flags(CLI::App* cmd, ModelConfig& cfg) {
  cmd->add_option("--vocab", cfg.vocab_size, "vocabulary size");
  cmd->add_option("--max-positions", cfg.max_positions, "maximum sequence length");
  cmd->add_option("--type-vocab", cfg.type_vocab_size, "token-type vocabulary size");
  cmd->add_option("--layers", cfg.n_layers, "number of transformer layers");
  cmd->add_option("--heads", cfg.n_heads, "number of attention heads");
  cmd->add_option("--hidden", cfg.hidden, "hidden size");
  cmd->add_option("--intermediate", cfg.intermediate, "feed-forward inner size");
  cmd->add_option("--dropout", cfg.dropout, "dropout probability");
  cmd->add_flag("--untied-decoder", [&cfg](std::int64_t) { cfg.tie_mlm_decoder = false; },
                "use a separate MLM decoder matrix instead of tying to the embeddings");
}

OperatorKind parse_operator(const std::string& name) {
  const auto kind = operator_kind_from_string(name);
  if (!kind) throw CLI::ValidationError("--operator", "must be original, symmetric or pairwise");
  return *kind;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for symmetric and pairwise dot-product attention"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  // params
  ParamsOptions params;
  auto* params_cmd = app.add_subcommand("params", "parameter-count report (exact counts)");
  params_cmd->add_option("selector", params.selector, "small | base | custom")->required();
  params_cmd->add_option("operator", params.op, "original | symmetric | pairwise | all");
  params_cmd->add_flag("--check", params.check, "fail unless the six reference counts match");
  params_cmd->add_option("--csv", params.csv_path, "also write the table as CSV");
  add_model_flags(params_cmd, params.custom);

  // verify
  VerifyOptions verify;
  auto* verify_cmd = app.add_subcommand("verify", "run the invariant suites");
  verify_cmd->add_option("suite", verify.suite, "algebra | gradients | counts | all");
  verify_cmd->add_option("--seed", verify.seed, "seed for the randomized checks");
  verify_cmd->add_option("--trials", verify.trials, "random instances per algebra identity");
  verify_cmd->add_option("--random-configs", verify.random_configs,
                         "random configs for the allocation check");

  // train
  TrainOptions train;
  std::string train_size = "toy";
  std::string train_operator = "original";
  auto* train_cmd = app.add_subcommand("train", "toy-scale MLM pre-training run");
  train_cmd->add_option("--size", train_size, "toy | small | base | custom (default toy)");
  train_cmd->add_option("--operator", train_operator, "original | symmetric | pairwise")
      ->required();
  train_cmd->add_flag("--toy", [&train_size](std::int64_t) { train_size = "toy"; },
                      "shorthand for --size toy");
  add_model_flags(train_cmd, train.model);
  train_cmd->add_option("--steps", train.train.steps, "optimization steps");
  train_cmd->add_option("--batch-size", train.train.batch_size, "sequences per step");
  train_cmd->add_option("--peak-lr", train.train.peak_lr, "peak learning rate");
  train_cmd->add_option("--warmup-steps", train.train.warmup_steps, "linear warmup steps");
  train_cmd->add_option("--weight-decay", train.train.weight_decay, "decoupled decay coefficient");
  train_cmd->add_option("--mask-prob", train.train.mask_prob, "MLM masking probability");
  train_cmd->add_flag("--mask-only", train.train.mask_token_only,
                      "replace every selected token with [MASK] (no 80/10/10 split)");
  train_cmd->add_option("--eval-every", train.train.eval_every, "steps between evaluations");
  train_cmd->add_option("--eval-batches", train.train.eval_batches, "held-out batches per eval");
  train_cmd->add_option("--seed", train.train.seed, "seed governing all randomness");
  train_cmd->add_option("--seq-len", train.corpus.seq_len, "corpus sequence length");
  train_cmd->add_option("--corpus-order", train.corpus.markov_order, "Markov order (1 or 2)");
  train_cmd->add_option("--corpus-temperature", train.corpus.transition_temperature,
                        "transition-row temperature");
  train_cmd->add_option("--corpus-sequences", train.corpus_sequences,
                        "corpus size (default: training need plus eval split)");
  train_cmd->add_flag("--save-corpus", train.save_corpus, "also write corpus.bin");
  train_cmd->add_option("--out", train.out_dir, "output directory")->required();

  // compare
  CompareOptions compare;
  auto* compare_cmd = app.add_subcommand("compare", "cross-operator report from trace CSVs");
  compare_cmd->add_option("traces", compare.traces, "two or more trace.csv files")->required();
  compare_cmd->add_option("--out", compare.out_dir, "directory for report.csv and combined.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (params_cmd->parsed()) {
      if (params.selector == "custom") params.custom.validate();
      return cmd_params(params, std::cout);
    }
    if (verify_cmd->parsed()) return cmd_verify(verify, std::cout);
    if (train_cmd->parsed()) {
      const OperatorKind kind = parse_operator(train_operator);
      if (train_size == "toy") {
        // keep explicit flag overrides: start from the preset, then re-apply
        ModelConfig preset = ModelConfig::toy(kind);
        preset.vocab_size = train_cmd->count("--vocab") ? train.model.vocab_size : preset.vocab_size;
        preset.max_positions =
            train_cmd->count("--max-positions") ? train.model.max_positions : preset.max_positions;
        preset.n_layers = train_cmd->count("--layers") ? train.model.n_layers : preset.n_layers;
        preset.n_heads = train_cmd->count("--heads") ? train.model.n_heads : preset.n_heads;
        preset.hidden = train_cmd->count("--hidden") ? train.model.hidden : preset.hidden;
        preset.intermediate =
            train_cmd->count("--intermediate") ? train.model.intermediate : preset.intermediate;
        preset.dropout = train_cmd->count("--dropout") ? train.model.dropout : preset.dropout;
        preset.tie_mlm_decoder = train.model.tie_mlm_decoder;
        train.model = preset;
      } else if (train_size == "small") {
        train.model = ModelConfig::bert_small(kind);
      } else if (train_size == "base") {
        train.model = ModelConfig::bert_base(kind);
      } else if (train_size == "custom") {
        train.model.operator_kind = kind;
      } else {
        std::cout << "train: unknown --size '" << train_size << "'\n";
        return kExitUsage;
      }
      train.model.validate();
      if (!train_cmd->count("--seq-len")) {
        train.corpus.seq_len = std::min(train.corpus.seq_len, train.model.max_positions);
      }
      return cmd_train(train, std::cout);
    }
    if (compare_cmd->parsed()) return cmd_compare(compare, std::cout);
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
