#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace harmon {

// Deterministic random source. One instance per independent stream; all
// stochastic choices in the library flow through a named Rng so runs are
// reproducible from a single seed and streams can be serialized mid-run.
class Rng {
public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1).
  float uniform();
  // Uniform in [lo, hi).
  float uniform(float lo, float hi);
  // Standard normal, float32.
  float normal();
  float normal(float mean, float stddev);
  // Uniform integer in [0, n). n must be > 0.
  int64_t index(int64_t n);

  // Fisher-Yates over [0, n) index vectors.
  std::vector<int64_t> permutation(int64_t n);

  // Engine state round-trip, used by checkpointing. The text form is the
  // standard stream serialization of mt19937_64.
  std::string save_state() const;
  void load_state(const std::string& text);

  std::mt19937_64& engine() { return engine_; }

private:
  std::mt19937_64 engine_;
};

}  // namespace harmon
