#pragma once

#include <cstddef>
#include <functional>

#include "fmd/tensor.hpp"

namespace fmd {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the autograd gradient of a scalar function against central
/// differences (f(x+e) - f(x-e)) / 2e, coordinate by coordinate.
/// Relative error is |a - n| / max(1e-8, |a| + |n|).
template <typename T>
GradCheckResult grad_check_detailed(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                    const Tensor<T>& x, double epsilon);

template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                  double epsilon) {
  return grad_check_detailed<T>(f, x, epsilon).max_relative_error;
}

}  // namespace fmd
