#include "propcache/gradcheck.hpp"

#include <cmath>

namespace propcache {

GradCheckResult check_gradients(const std::function<ad::Var()>& loss_fn,
                                std::vector<ad::Var> params, double step) {
  for (auto& p : params) p.zero_grad();
  ad::backward(loss_fn());
  std::vector<Tensor> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& value = params[k].mutable_value();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = loss_fn().value().item();
      value[i] = saved - step;
      const double down = loss_fn().value().item();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    const double rel = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    result.per_param.push_back(rel);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = k;
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace propcache
