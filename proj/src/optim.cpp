#include "propcache/optim.hpp"

#include <cmath>

#include "propcache/errors.hpp"

namespace propcache {

void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, const AdamWConfig& cfg,
                double lr) {
  if (grad.shape() != param.shape()) {
    throw ShapeMismatch("adamw grad " + shape_str(grad.shape()) + " vs param " +
                        shape_str(param.shape()));
  }
  if (state.m.shape() != param.shape()) {
    if (state.step != 0 || !state.m.empty()) throw ShapeMismatch("adamw state shape");
    state.m = Tensor(param.shape(), 0.0);
    state.v = Tensor(param.shape(), 0.0);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= lr * cfg.weight_decay * param[i];
    param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

AdamW::AdamW(std::vector<ad::Var> params, AdamWConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {}

void AdamW::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adamw_step(params_[i].mutable_value(), params_[i].grad(), states_[i], cfg_, lr);
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace propcache
