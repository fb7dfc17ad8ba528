#pragma once

// Central finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include "epee/autodiff.hpp"
#include "epee/tensor.hpp"

namespace epee {

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

namespace detail {

inline void require_step(double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw std::invalid_argument("grad_check: epsilon " + std::to_string(epsilon) + " outside [1e-7, 1e-3]");
  }
}

inline double checked(double loss) {
  if (!std::isfinite(loss)) throw std::domain_error("grad_check: non-finite loss");
  return loss;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace detail

/// Max over entries of |analytic - central difference| / max(1, |central difference|).
/// `f` maps a parameter matrix to its loss and analytic gradient.
inline double grad_check(const std::function<LossAndGrad(const Matrix&)>& f, const Matrix& params,
                         double epsilon) {
  detail::require_step(epsilon);
  LossAndGrad at = f(params);
  detail::checked(at.loss);
  if (!at.grad.same_shape(params)) {
    throw DimensionError("grad_check: gradient " + at.grad.shape() + " vs params " + params.shape());
  }
  Matrix probe = params;
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double saved = probe.data()[k];
    probe.data()[k] = saved + epsilon;
    const double up = detail::checked(f(probe).loss);
    probe.data()[k] = saved - epsilon;
    const double down = detail::checked(f(probe).loss);
    probe.data()[k] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, detail::relative_error(at.grad.data()[k], numeric));
  }
  return worst;
}

/// Same check over a set of Parameters in place. `loss_and_backward` must
/// return the loss and, when asked, accumulate gradients into each
/// Parameter::grad (which this function zeroes first). Values are restored.
inline double grad_check_parameters(std::span<Parameter* const> params,
                                    const std::function<double(bool with_grad)>& loss_and_backward,
                                    double epsilon) {
  detail::require_step(epsilon);
  for (Parameter* p : params) p->zero_grad();
  detail::checked(loss_and_backward(true));
  double worst = 0.0;
  for (Parameter* p : params) {
    auto values = p->value.data();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + epsilon;
      const double up = detail::checked(loss_and_backward(false));
      values[k] = saved - epsilon;
      const double down = detail::checked(loss_and_backward(false));
      values[k] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      worst = std::max(worst, detail::relative_error(p->grad.data()[k], numeric));
    }
  }
  return worst;
}

}  // namespace epee
