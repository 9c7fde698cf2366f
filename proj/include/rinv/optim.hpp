#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rinv/tensor.hpp"

namespace rinv {

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

/// One Adam step with bias correction. Weight decay enters as an extra
/// lr * weight_decay * param term outside the adaptive scaling.
/// Moment buffers are sized lazily on the first call.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

/// lr_max * 0.5 * (1 + cos(pi * step / total_steps)), no warmup.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max);

}  // namespace rinv
