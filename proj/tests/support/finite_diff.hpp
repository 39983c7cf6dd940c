#pragma once

#include <algorithm>
#include <cmath>
#include <string>

namespace testsupport {

constexpr double kFdStep = 1e-5;
constexpr double kGradTol = 1e-4;

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  std::string describe() const {
    return "worst index " + std::to_string(worst_index) + ": analytic " +
           std::to_string(worst_analytic) + " vs numeric " + std::to_string(worst_numeric) +
           " (rel err " + std::to_string(max_rel_err) + ")";
  }
};

// Central differences over every entry of a parameter block. `loss` must
// recompute the scalar objective from the current parameter values each
// time it is called; entries are perturbed in place and restored.
template <typename LossFn>
GradCheckResult check_gradient(LossFn&& loss, double* param, const double* analytic, int n,
                               double h = kFdStep) {
  GradCheckResult res;
  for (int i = 0; i < n; ++i) {
    const double saved = param[i];
    param[i] = saved + h;
    const double lp = loss();
    param[i] = saved - h;
    const double lm = loss();
    param[i] = saved;
    const double numeric = (lp - lm) / (2.0 * h);
    const double e = rel_err(analytic[i], numeric);
    if (e >= res.max_rel_err) {
      res.max_rel_err = e;
      res.worst_index = i;
      res.worst_analytic = analytic[i];
      res.worst_numeric = numeric;
    }
  }
  return res;
}

}  // namespace testsupport
