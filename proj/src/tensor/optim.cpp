#include "tensor/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace magmix {

template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamWState<T>& state, double lr, const AdamWConfig& cfg) {
  if (state.first_moment.size() != params.size()) {
    if (state.step != 0 || !state.first_moment.empty()) {
      throw ConfigError("adamw_step: optimizer state does not match parameter list");
    }
    for (const Parameter<T>* p : params) {
      state.first_moment.push_back(Tensor<T>::zeros_like(p->value));
      state.second_moment.push_back(Tensor<T>::zeros_like(p->value));
    }
  }
  for (const Parameter<T>* p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError("adamw_step: non-finite gradient in parameter '" + p->name + "' at step " +
                         std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T step_size = T(lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T eps = T(cfg.eps);
  const T decay = T(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (!p.trainable) continue;
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const bool wd = p.decay && cfg.weight_decay != 0.0;
    for (Index j = 0; j < p.value.size(); ++j) {
      if (wd) w[j] *= decay;
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

template void adamw_step<float>(std::span<Parameter<float>* const>, AdamWState<float>&, double, const AdamWConfig&);
template void adamw_step<double>(std::span<Parameter<double>* const>, AdamWState<double>&, double,
                                 const AdamWConfig&);

}  // namespace magmix
