#pragma once

#include <vector>

#include "propcache/autodiff.hpp"
#include "propcache/tensor.hpp"

namespace propcache {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// First and second moment estimates for one parameter tensor.
struct AdamWState {
  Tensor m;
  Tensor v;
  long step = 0;
};

// One decoupled-weight-decay Adam update, in place. `lr` overrides cfg.lr so
// schedules can drive it.
void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, const AdamWConfig& cfg,
                double lr);

// Owns moment state for a fixed list of leaf parameters.
class AdamW {
 public:
  AdamW(std::vector<ad::Var> params, AdamWConfig cfg);

  // Applies one update from the current leaf grads, then clears them.
  void step(double lr);
  void step() { step(cfg_.lr); }
  void zero_grad();

  const AdamWConfig& config() const { return cfg_; }
  const std::vector<ad::Var>& params() const { return params_; }

 private:
  std::vector<ad::Var> params_;
  std::vector<AdamWState> states_;
  AdamWConfig cfg_;
};

}  // namespace propcache
