#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "attnlab/model.hpp"
#include "attnlab/train.hpp"

namespace attnlab {

inline constexpr const char* kToolName = "attnlab";
inline constexpr const char* kToolVersion = "0.1.0";

// Exit code contract, stable for CI.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // verification or assertion failure
inline constexpr int kExitUsage = 2;    // bad flags, unreadable input, refusals

struct ParamsOptions {
  std::string selector = "base";  // small | base | custom
  std::string op = "all";         // original | symmetric | pairwise | all
  bool check = false;
  std::filesystem::path csv_path;  // optional CSV next to the table
  ModelConfig custom;              // used when selector == "custom"
};

// Parameter-count report with relative savings against the original
// operator. --check additionally pins all six reference counts and fails
// the run when any deviates.
int cmd_params(const ParamsOptions& options, std::ostream& out);

struct VerifyOptions {
  std::string suite = "all";  // algebra | gradients | counts | all
  std::uint64_t seed = 20240601;
  int trials = 100;
  int random_configs = 50;
};

int cmd_verify(const VerifyOptions& options, std::ostream& out);

struct TrainOptions {
  ModelConfig model = ModelConfig::toy(OperatorKind::Original);
  TrainConfig train;
  // Corpus recipe; its seed is overridden from train.seed so one flag
  // governs every random stream.
  CorpusSpec corpus;
  int corpus_sequences = 0;  // 0 = training need plus eval split
  std::filesystem::path out_dir;
  bool save_corpus = false;
};

// Generates the corpus, trains one model, writes trace.csv, checkpoint.bin
// and manifest.json under out_dir.
int cmd_train(const TrainOptions& options, std::ostream& out);

struct CompareOptions {
  std::vector<std::filesystem::path> traces;
  std::filesystem::path out_dir;
};

// Cross-operator comparison of traces from identical (data seed, schedule)
// runs: final eval loss, steps to 95% of the total drop, plateau exit.
// Refuses traces whose schedules or seeds differ.
int cmd_compare(const CompareOptions& options, std::ostream& out);

}  // namespace attnlab
