// Copyright 2026 The d2lora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace d2lora {

/// Outcome of one property check. max_slack is the worst measured value of
/// the check's statistic; pass requires max_slack <= threshold plus any
/// check-specific side conditions listed in details.
struct CheckReport {
  std::string check;
  std::size_t trials = 0;
  double max_slack = 0.0;
  double threshold = 0.0;
  bool pass = false;
  nlohmann::json details = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Multiplies every tolerance; values below 1 tighten the suite.
  double threshold_scale = 1.0;
  /// 0 keeps each check's default trial count.
  std::size_t trials = 0;
};

/// max relative |‖W*_j‖ - m_j| / m_j over unclamped columns (default 1000 layers).
CheckReport check_norm_preservation(const VerifyOptions& opt);
/// merged vs eval-unmerged relative gap, plus the 16 eps ‖x‖(‖W*‖+‖dW‖) bound.
CheckReport check_merge_equivalence(const VerifyOptions& opt);
/// Central differences (h = 1e-5) on every factor, tau and x over 50 configs.
CheckReport check_gradients(const VerifyOptions& opt);
/// Fraction of 32x32, r+ = r- = 4 trials whose dW rank differs from 8.
CheckReport check_rank(const VerifyOptions& opt);
/// Projection-off, minus-off layer vs a separately coded LoRA.
CheckReport check_lora_reduction(const VerifyOptions& opt);
/// Worst ratio of observed Lipschitz quotient to its bound over 1e4 pairs.
CheckReport check_lipschitz(const VerifyOptions& opt);
/// z-score of the mean ‖dW‖_F^2 against the closed form and a Monte Carlo oracle.
CheckReport check_branch_energy(const VerifyOptions& opt);
/// Minus-off vs detached-minus training traces over 200 steps.
CheckReport check_minus_equivalence(const VerifyOptions& opt);
/// Directional-branch gradient rows are orthogonal to u_j when unclamped.
CheckReport check_tangent_orthogonality(const VerifyOptions& opt);

const std::vector<std::string>& check_names();
/// Runs one check by name; throws ConfigError for an unknown name.
CheckReport run_check(const std::string& name, const VerifyOptions& opt);

struct SuiteReport {
  std::uint64_t seed = 0;
  std::vector<CheckReport> checks;
  bool pass = false;

  nlohmann::json to_json() const;
};

/// "all" or a single check name. Each check gets seed derive_seed(seed, i).
SuiteReport run_suite(const std::string& suite, const VerifyOptions& opt);

}  // namespace d2lora
