#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "harmon/checkpoint.hpp"
#include "harmon/losses.hpp"
#include "harmon/model.hpp"
#include "harmon/optimizer.hpp"
#include "harmon/phantom.hpp"
#include "harmon/rng.hpp"
#include "harmon/ssim.hpp"
#include "harmon/volume.hpp"

namespace harmon {

struct TrainConfig {
  int64_t steps = 800;
  int batch_size = 1;  // kept explicit in configs; only 1 is implemented
  float lr_generator = 1e-4f;
  float lr_critic = 1e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  uint64_t seed = 1;
  // Share of the corpus that keeps its site label; the rest becomes the
  // unlabeled pool.
  float labeled_fraction = 0.5f;
  int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  std::string corpus_manifest;
  std::string out_dir;
  LossWeights weights;
  ModelConfig model;
  SsimParams ssim;

  void validate() const;
};

// Single JSON document with flat scalar keys plus nested "weights", "model"
// and "ssim" objects. Absent keys keep their defaults; unknown keys are
// rejected so config typos fail loudly.
TrainConfig parse_train_config(const std::string& json_text);
std::string train_config_json(const TrainConfig& config);

// Owns the networks, both optimizers and the step RNG. One instance drives
// one training run; run_training wraps it with corpus plumbing.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);

  // One optimization step on an (unlabeled, labeled) pair: critics update
  // on their objective first, then the generator side sees the updated
  // critics. The same per-step noise draw feeds both phases. Throws
  // NumericError naming the term and step if any loss goes non-finite.
  LossReport train_step(const Volume& x_u, const LabeledVolume& x_l);

  int64_t step_count() const { return step_; }
  HarmonizationModel& model() { return model_; }
  const HarmonizationModel& model() const { return model_; }
  Rng& rng() { return rng_; }

  // Full training state: weights, both optimizers' moments, RNG, step.
  Checkpoint snapshot() const;
  void save(const std::string& path) const;
  // Restores a snapshot taken under the same model config; subsequent
  // behavior is bit-identical to never having paused.
  void restore(const Checkpoint& ckpt);

 private:
  TrainConfig config_;
  HarmonizationModel model_;
  Adam opt_g_;
  Adam opt_d_;
  Rng rng_;
  int64_t step_ = 0;
};

// Labeled/unlabeled split of a corpus, as indices into manifest.records:
// records are put in canonical (subject, site, file) order, a seeded shuffle
// of that order assigns the first ceil(fraction * N) to the labeled pool.
// Pure function of record identities, so training is invariant to manifest
// file ordering.
struct PoolAssignment {
  std::vector<size_t> labeled;
  std::vector<size_t> unlabeled;
};

PoolAssignment assign_pools(const Manifest& manifest, float labeled_fraction,
                            uint64_t seed);

struct TrainResult {
  int64_t steps_run = 0;
  std::string log_path;
  std::string final_checkpoint;
  std::vector<LossReport> reports;
};

// Drives Trainer over the manifest corpus: deterministic schedule from the
// seed, one loss log line per step, checkpoints at the configured interval
// plus a final one (step 0 included, so steps=0 persists the initial state).
// With resume_checkpoint the run continues to config.steps, appending to an
// existing log.
TrainResult run_training(const TrainConfig& config,
                         const std::string& resume_checkpoint = {});

}  // namespace harmon
