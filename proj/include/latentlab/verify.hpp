#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace latentlab::verify {

enum class Comparison { kAtMost, kAtLeast };

/// One property check: `value` must be <= (or >=) `threshold`.
struct CheckResult {
  std::string suite;
  std::string check;
  double value = 0.0;
  double threshold = 0.0;
  Comparison comparison = Comparison::kAtMost;
  bool passed = false;

  nlohmann::json to_json() const;
};

const std::vector<std::string>& suite_names();

/// Runs one suite ("gaussian", "fa", "ppca", "elbo", "autodiff", "vae") or
/// "all". Deterministic given the seed.
std::vector<CheckResult> run_suite(const std::string& suite, std::uint64_t seed);

}  // namespace latentlab::verify
