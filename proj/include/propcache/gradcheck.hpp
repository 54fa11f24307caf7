#pragma once

#include <functional>
#include <string>
#include <vector>

#include "propcache/autodiff.hpp"

namespace propcache {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::vector<double> per_param;  // ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)
};

// Compares reverse-mode gradients of `loss_fn` against central differences.
// `loss_fn` must rebuild its graph from the current values of `params`.
GradCheckResult check_gradients(const std::function<ad::Var()>& loss_fn,
                                std::vector<ad::Var> params, double step = 1e-5);

}  // namespace propcache
