#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "captionforge/gradcheck.hpp"

namespace captionforge {

struct GradSuiteEntry {
  std::string name;
  double tolerance;
  GradCheckReport report;

  bool passed() const { return report.max_relative_error < tolerance; }
};

/// Finite-difference checks of every differentiable op, attention, and tiny
/// end-to-end models (d_model 8, one layer, vocabulary 11). Inputs are drawn
/// from [-2, 2] with the given seed.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 0);

}  // namespace captionforge
