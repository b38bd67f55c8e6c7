#include "imcat/optimizer.hpp"

#include <cmath>
#include <vector>

namespace imcat {

AdamState AdamState::for_params(const ParamSet& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& cfg) {
  ++state.t;
  const Real t = static_cast<Real>(state.t);
  const Real bc1 = 1.0 - std::pow(cfg.beta1, t);
  const Real bc2 = 1.0 - std::pow(cfg.beta2, t);
  const Real decay = 1.0 - cfg.lr * cfg.weight_decay;

  std::vector<const Matrix*> g;
  std::vector<Matrix*> m, v;
  grads.visit([&](const std::string&, const Matrix& x, bool) { g.push_back(&x); });
  state.m.visit([&](const std::string&, Matrix& x, bool) { m.push_back(&x); });
  state.v.visit([&](const std::string&, Matrix& x, bool) { v.push_back(&x); });
  std::size_t i = 0;
  params.visit([&](const std::string& name, Matrix& p, bool is_weight) {
    if (g[i]->rows() != p.rows() || g[i]->cols() != p.cols())
      throw DimError("gradient shape mismatch for " + name);
    if (is_weight && cfg.weight_decay != 0) p *= decay;
    m[i]->array() = cfg.beta1 * m[i]->array() + (1.0 - cfg.beta1) * g[i]->array();
    v[i]->array() = cfg.beta2 * v[i]->array() + (1.0 - cfg.beta2) * g[i]->array().square();
    p.array() -= cfg.lr * (m[i]->array() / bc1) / ((v[i]->array() / bc2).sqrt() + cfg.eps);
    ++i;
  });
}

}  // namespace imcat
