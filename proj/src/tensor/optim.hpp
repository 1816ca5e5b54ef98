#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tensor/tape.hpp"

namespace magmix {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::int64_t step = 0;
};

// One AdamW update at learning rate `lr` (the schedule is applied by the caller).
// Weight decay is decoupled: p <- p * (1 - lr * wd) for parameters flagged for
// decay, then the bias-corrected Adam step. Throws NumericError on a
// non-finite gradient.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamWState<T>& state, double lr, const AdamWConfig& cfg);

// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

}  // namespace magmix
