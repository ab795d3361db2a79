#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace uconv::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Parameter budgets of the named presets plus the x2 downsampling block.
std::vector<CheckResult> run_params_suite();

// CTC loss and beam-search top-1 against brute-force path enumeration.
std::vector<CheckResult> run_oracle_suite(uint64_t seed);

// Central finite differences against every layer type and the CTC loss.
std::vector<CheckResult> run_grad_suite(uint64_t seed);

// Stage-length tables and the final-length approximation.
std::vector<CheckResult> run_lengths_suite(uint64_t seed);

// Feasibility rule against path enumeration on an exhaustive target grid.
std::vector<CheckResult> run_feasibility_suite();

std::vector<CheckResult> run_all(uint64_t seed);

// Prints one [PASS]/[FAIL] line per result; returns the failure count.
int print_results(const std::vector<CheckResult>& results, std::ostream& os);

}  // namespace uconv::checks
