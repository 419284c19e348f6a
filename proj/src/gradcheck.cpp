#include "fmd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fmd {

namespace {

template <typename T>
double eval_scalar(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x) {
  NoGradGuard no_grad;
  const Tensor<T> y = f(x);
  if (y.numel() != 1) throw std::invalid_argument("grad_check: function must return a scalar");
  const double v = static_cast<double>(y.item());
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

template <typename T>
GradCheckResult grad_check_detailed(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                    const Tensor<T>& x, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be positive");

  Tensor<T> leaf = x.detach();
  leaf.set_requires_grad(true);
  Tensor<T> y = f(leaf);
  if (y.numel() != 1) throw std::invalid_argument("grad_check: function must return a scalar");
  if (!std::isfinite(static_cast<double>(y.item()))) {
    throw NumericError("grad_check: function value is not finite");
  }

  std::vector<T> analytic(x.numel(), T(0));
  if (y.requires_grad()) {
    y.backward();
    if (Tensor<T> g = leaf.grad(); g.defined()) {
      std::copy(g.data().begin(), g.data().end(), analytic.begin());
    }
  }

  GradCheckResult result;
  Tensor<T> probe = x.detach();
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T original = values[i];
    values[i] = static_cast<T>(original + epsilon);
    const double plus = eval_scalar(f, probe);
    values[i] = static_cast<T>(original - epsilon);
    const double minus = eval_scalar(f, probe);
    values[i] = original;

    const double numeric = (plus - minus) / (2.0 * epsilon);
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (i == 0 || err > result.max_relative_error) {
      result = GradCheckResult{err, i, a, numeric};
    }
  }
  return result;
}

template GradCheckResult grad_check_detailed<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                                    const Tensor<float>&, double);
template GradCheckResult grad_check_detailed<double>(
    const std::function<Tensor<double>(const Tensor<double>&)>&, const Tensor<double>&, double);

}  // namespace fmd
