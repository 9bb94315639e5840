#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "harmon/probe.hpp"
#include "harmon/ssim.hpp"
#include "harmon/volume.hpp"

namespace harmon {

struct SummaryStat {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 when fewer than 2 values
};

// Per-volume mean intensities for one site.
struct SiteDistribution {
  int site_index = 0;
  std::string site_name;
  std::vector<double> samples;
};

// Row-major K x K matrix of pairwise distances plus the upper-triangle
// summary. Built symmetric with an exactly-zero diagonal.
struct W1Matrix {
  std::vector<std::string> site_names;
  std::vector<double> values;
  SummaryStat summary;

  int k() const { return static_cast<int>(site_names.size()); }
  double at(int i, int j) const { return values[static_cast<size_t>(i) * site_names.size() + j]; }
};

// 1-Wasserstein distance between two empirical distributions. Equal sizes
// reduce to the mean absolute difference of sorted samples; unequal sizes
// use the merged-quantile piecewise-constant form with exact integer
// segment masses.
double w1_distance(const std::vector<double>& a, const std::vector<double>& b);

// Mean voxel intensity; with foreground_only, restricted to voxels > 0.05
// (0 when nothing passes the mask). Whether background belongs in the mean
// is a judgment call, so reports carry both variants.
double volume_mean(const Volume& v, bool foreground_only = false);

std::vector<SiteDistribution> site_mean_distributions(
    const std::vector<LabeledVolume>& set, bool foreground_only = false);

W1Matrix pairwise_w1_matrix(const std::vector<SiteDistribution>& dists);

// Mean/sd of the luminance component over unordered volume pairs. When the
// pair count exceeds pair_cap, a seeded subset of pairs is scored instead.
SummaryStat luminance_similarity_summary(const std::vector<const Volume*>& volumes,
                                         const SsimParams& params = SsimParams{},
                                         int64_t pair_cap = 2000,
                                         uint64_t seed = 0);

// Mean/sd of the structure component over index-matched original/harmonized
// pairs.
SummaryStat structural_preservation_summary(
    const std::vector<const Volume*>& originals,
    const std::vector<const Volume*>& harmonized,
    const SsimParams& params = SsimParams{});

struct SiteDistributionSet {
  std::vector<SiteDistribution> whole;
  std::vector<SiteDistribution> foreground;
};

struct TargetEval {
  std::string target;
  SiteDistributionSet sites;
  W1Matrix w1;
  W1Matrix w1_foreground;
  SummaryStat luminance;
  SummaryStat structural;
};

struct EvalReport {
  std::string corpus;
  std::string timestamp;
  SiteDistributionSet pre_sites;
  W1Matrix pre_w1;
  W1Matrix pre_w1_foreground;
  SummaryStat pre_luminance;
  std::vector<TargetEval> targets;
  std::optional<ProbeResult> probe;
};

// Writes report.json plus one CSV per distance matrix and per-site sample
// CSVs. Emission is a pure function of the report contents.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

}  // namespace harmon
