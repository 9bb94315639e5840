#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "harmon/tensor.hpp"

namespace harmon {

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  void validate() const;  // lr > 0 allowed to be 0 for frozen groups; betas in [0,1)
};

// Per-parameter moment buffers plus the shared update counter. Kept as a
// plain value type so checkpoints can lift it out and put it back.
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<float>> m;  // first moments, one entry per parameter
  std::vector<std::vector<float>> v;  // second moments
};

// Adaptive moment estimation over a named parameter group. The optimizer
// aliases the tensors it is given: step() reads their accumulated grads,
// updates values in place, then clears the grads. Parameters whose grad is
// empty for a step are treated as receiving zero gradient (moments decay).
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig config);

  // One update: m,v decay toward the grad stats, bias-corrected step is
  // applied to every parameter, grads are zeroed.
  void step();

  int64_t step_count() const { return state_.step; }
  const std::vector<std::pair<std::string, Tensor>>& params() const {
    return params_;
  }
  const AdamConfig& config() const { return config_; }

  const AdamState& state() const { return state_; }
  // Replaces the moment buffers; shapes must match the parameter group.
  void restore(AdamState state);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  AdamConfig config_;
  AdamState state_;
};

}  // namespace harmon
