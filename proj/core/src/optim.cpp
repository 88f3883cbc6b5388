#include "tbloc/optim.hpp"

#include <cmath>

#include "tbloc/error.hpp"

namespace tbloc {

void adam_update(std::span<double> param, std::span<const double> grad, AdamState& state,
                 const AdamConfig& config) {
  if (param.size() != grad.size()) throw InvalidArgument("adam: parameter and gradient sizes differ");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) throw InvalidArgument("adam: state size does not match parameter");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

void Adam::zero_grad(DetectorModel& model) const {
  for (auto& p : model.parameters()) {
    if (select_(p.name)) p.value.zero_grad();
  }
}

void Adam::step(DetectorModel& model) {
  for (const auto& p : model.parameters()) {
    if (!select_(p.name) || !p.value.has_grad()) continue;
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  for (auto& p : model.parameters()) {
    if (!select_(p.name) || !p.value.has_grad()) continue;
    adam_update(p.value.mutable_data(), p.value.grad(), state_[p.name], config_);
  }
}

}  // namespace tbloc
