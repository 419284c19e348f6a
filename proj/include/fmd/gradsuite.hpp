#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fmd {

struct GradSuiteOptions {
  /// Random instances per case.
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  /// Include the composed generator and discriminator.
  bool composed = true;
};

struct GradSuiteCase {
  std::string name;
  std::size_t instances = 0;
  /// Largest relative error over all instances.
  double worst = 0.0;
};

/// Central finite-difference checks of every differentiable op, the losses
/// (including the second-order gradient penalty) and the composed networks.
template <typename T>
std::vector<GradSuiteCase> run_grad_suite(const GradSuiteOptions& options = {});

/// Pass threshold for the suite at a given precision.
template <typename T>
double grad_suite_tolerance();

}  // namespace fmd
