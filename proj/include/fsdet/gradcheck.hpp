#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fsdet {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  /// Vector sizes of the metric-head suites.
  std::vector<std::size_t> dims{8, 32, 128};
  /// Random draws per dimension for the metric-head suites.
  std::size_t trials = 1000;
  /// Random draws for each layer suite.
  std::size_t layer_trials = 100;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-3;
  /// Test hook: perturbs one component of the analytic Pearson query gradient.
  bool corrupt_pearson = false;
};

struct SuiteResult {
  std::string name;
  std::size_t trials = 0;
  /// Gradient components compared.
  std::size_t checks = 0;
  /// Components or draws left out for sitting within 1e-3 of a kink or a tie.
  std::size_t excluded = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<SuiteResult> suites;
  bool passed = true;
  /// True when nothing was compared at all.
  bool empty = true;
};

/// Central-difference checks of the composed metric head (similarity -> temperature softmax ->
/// cross-entropy, with respect to the query and every prototype, both metrics) and of every
/// layer op's backward pass.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace fsdet
