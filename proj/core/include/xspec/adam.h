#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xspec/tensor.h"

namespace xspec::ad {

// Bias-corrected adaptive-moment update. Moment buffers are keyed by
// position in the parameter list handed to adam_step, so the list must be
// stable across steps (it is: one state per field / per pose latent).
struct AdamState {
  int64_t step_count = 0;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
};

// Allocates zeroed moments matching each parameter's shape.
AdamState make_adam_state(std::span<const Tensor> params, float learning_rate,
                          float beta1 = 0.9f, float beta2 = 0.999f,
                          float epsilon = 1e-8f);

// In-place update of params from their accumulated gradients. Parameters
// without an allocated gradient buffer are treated as zero-gradient.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace xspec::ad
