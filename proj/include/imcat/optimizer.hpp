#pragma once

#include <cstdint>

#include "imcat/model.hpp"

namespace imcat {

struct AdamConfig {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 1e-3;
};

/// First/second moments shaped like the parameters, plus the step count.
struct AdamState {
  ParamSet m;
  ParamSet v;
  std::uint64_t t = 0;

  static AdamState for_params(const ParamSet& params);
};

/// One bias-corrected Adam step with decoupled weight decay: weights (not
/// biases) are first scaled by (1 - lr * weight_decay). Increments state.t.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& config);

}  // namespace imcat
