#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/model.hpp"

namespace attnlab {

struct CheckResult {
  std::string name;
  bool pass = false;
  double worst = 0.0;    // measured worst-case error for the invariant
  double bound = 0.0;    // the tolerance it was held to
  std::string detail;
};

// Algebraic identities of the three compatibility operators, measured on
// `trials` random instances each.
std::vector<CheckResult> verify_algebra(std::uint64_t seed, int trials);

// Analytic gradients against central finite differences: individual ops,
// then every parameter tensor of the tiny two-layer model for all three
// operators.
std::vector<CheckResult> verify_gradients(std::uint64_t seed);

// Published parameter counts and allocation consistency on random configs.
std::vector<CheckResult> verify_counts(std::uint64_t seed, int random_configs);

// Straight-line re-implementation of the full MLM forward in long double:
// plain loops over the parameter arrays, no autodiff graph. Independent
// route for checking forward values, and the function probed by the
// full-model finite differences, where double rounding at step 1e-4 would
// swamp near-zero gradients.
long double reference_mlm_loss(const EncoderModel& model, const MaskedBatch& batch);

// Worst relative error between backward() and central finite differences of
// reference_mlm_loss over every trainable tensor of the model, denominator
// max(|a|, |b|, 1e-8).
double model_grad_max_rel_error(EncoderModel& model, const MaskedBatch& batch,
                                double step = 1e-4);

// 100 * (1 - variant / original) rendered with two decimals, the format used
// for the reference relative-savings figures.
std::string savings_percent(std::int64_t variant, std::int64_t original);

}  // namespace attnlab
