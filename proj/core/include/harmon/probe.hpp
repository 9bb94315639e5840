#pragma once

#include <cstdint>
#include <vector>

#include "harmon/volume.hpp"

namespace harmon {

// Result of one cross-validated site-classification run.
struct ProbeRun {
  double accuracy = 0.0;
  std::vector<double> fold_accuracies;
};

// Raw-vs-harmonized pairing as it lands in evaluation reports.
struct ProbeResult {
  ProbeRun raw;
  ProbeRun harmonized;
  double chance = 0.0;
  int folds = 0;
};

// Trains a small fixed classifier (32-bin intensity histogram features into
// a linear softmax head) under stratified k-fold cross-validation and
// reports the mean held-out accuracy. The probe measures how much
// scanner-site signal survives in plain intensity statistics, so the
// feature path is identical for raw and harmonized inputs.
//
// Requires at least two sites and at least 10 volumes per site.
ProbeRun run_site_probe(const std::vector<LabeledVolume>& data, int folds = 5,
                        uint64_t seed = 0);

}  // namespace harmon
