#pragma once

// Finite-difference verification of every differentiable primitive and of the
// four training losses (DCR, RiFU, RiFUNet, SPD-DCNet).

#include <cstdint>
#include <string>
#include <vector>

namespace spdgeo {

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  int instances = 10;   // random instances per case
  double step = 1e-5;   // central-difference step
  double tolerance = 1e-4;
  int max_dim = 8;
};

struct GradSuiteCase {
  std::string name;
  double worst = 0.0;  // worst relative error over the instances
  int instances = 0;
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradSuiteCase> cases;
  double seconds = 0.0;

  bool passed() const;
};

/// Case names in run order.
std::vector<std::string> gradient_suite_cases();

/// Runs the cases whose name starts with `filter` (all when empty).
GradSuiteReport run_gradient_suite(const GradSuiteOptions& opt = {}, const std::string& filter = "");

}  // namespace spdgeo
