#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "harmon/model.hpp"
#include "harmon/tensor.hpp"

namespace harmon {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

// Everything needed to restart training bit-exactly: weights and optimizer
// moments as named float tensors, the model config as text, the RNG state,
// and the step counters. Inference-side consumers read only the weights.
struct Checkpoint {
  ModelConfig model;
  int64_t step = 0;
  std::string rng_state;
  int64_t generator_opt_step = 0;
  int64_t critic_opt_step = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

// Versioned binary container. The payload is checksummed, so flipped bits
// and truncation surface as FormatError rather than silent weight garbage.
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

// Copies every live model parameter out of the container by name; a missing
// name or a shape mismatch is a FormatError.
void load_weights(HarmonizationModel& model, const Checkpoint& ckpt);

// Construct-from-container shortcut for inference-side consumers; optimizer
// state in the container is ignored.
HarmonizationModel load_model(const Checkpoint& ckpt);

}  // namespace harmon
