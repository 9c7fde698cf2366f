#include "rinv/optim.hpp"

#include <cmath>
#include <numbers>

namespace rinv {

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment shape does not match parameter " + std::to_string(i));
    }
    if (!params[i].has_grad()) throw ContractError("adam_step: parameter without gradient");
    if constexpr (kVerificationMode<T>) detail::check_finite<T>(params[i].grad(), "adam gradient");
  }

  state.t += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  const double lr = state.lr, wd = state.weight_decay, eps = state.epsilon;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data_mut();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + eps) + wd * w[k];
      w[k] = static_cast<T>(w[k] - lr * update);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max) {
  if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&);

}  // namespace rinv
