#include "harmon/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>

#include "harmon/errors.hpp"
#include "harmon/rng.hpp"

namespace harmon {

namespace {

constexpr int kBins = 32;
constexpr int kIters = 800;
constexpr double kLearningRate = 2.0;

// Histogram density over [0,1] plus a trailing bias feature.
std::vector<double> histogram_features(const Volume& v) {
  std::vector<double> f(kBins + 1, 0.0);
  for (float raw : v.voxels) {
    float x = std::clamp(raw, 0.0f, 1.0f);
    int bin = std::min(kBins - 1, static_cast<int>(x * kBins));
    f[static_cast<size_t>(bin)] += 1.0;
  }
  double n = static_cast<double>(v.numel());
  for (int b = 0; b < kBins; ++b) f[static_cast<size_t>(b)] /= n;
  f[kBins] = 1.0;
  return f;
}

int predict(const std::vector<double>& w, int classes,
            const std::vector<double>& f) {
  int best = 0;
  double best_z = -1e300;
  for (int k = 0; k < classes; ++k) {
    double z = 0.0;
    for (size_t j = 0; j < f.size(); ++j)
      z += w[static_cast<size_t>(k) * f.size() + j] * f[j];
    if (z > best_z) {
      best_z = z;
      best = k;
    }
  }
  return best;
}

// Full-batch softmax regression from a zero start. The objective is convex,
// so the fit is deterministic without any weight initialization draws.
std::vector<double> train_softmax(const std::vector<std::vector<double>>& feats,
                                  const std::vector<int>& labels, int classes) {
  size_t dim = feats.front().size();
  std::vector<double> w(static_cast<size_t>(classes) * dim, 0.0);
  std::vector<double> grad(w.size());
  std::vector<double> p(static_cast<size_t>(classes));
  double inv_m = 1.0 / static_cast<double>(feats.size());
  for (int it = 0; it < kIters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (size_t i = 0; i < feats.size(); ++i) {
      const auto& f = feats[i];
      double zmax = -1e300;
      for (int k = 0; k < classes; ++k) {
        double z = 0.0;
        for (size_t j = 0; j < dim; ++j) z += w[static_cast<size_t>(k) * dim + j] * f[j];
        p[static_cast<size_t>(k)] = z;
        zmax = std::max(zmax, z);
      }
      double norm = 0.0;
      for (int k = 0; k < classes; ++k) {
        p[static_cast<size_t>(k)] = std::exp(p[static_cast<size_t>(k)] - zmax);
        norm += p[static_cast<size_t>(k)];
      }
      for (int k = 0; k < classes; ++k) {
        double delta = p[static_cast<size_t>(k)] / norm -
                       (k == labels[i] ? 1.0 : 0.0);
        for (size_t j = 0; j < dim; ++j)
          grad[static_cast<size_t>(k) * dim + j] += delta * f[j];
      }
    }
    for (size_t j = 0; j < w.size(); ++j) w[j] -= kLearningRate * inv_m * grad[j];
  }
  return w;
}

}  // namespace

ProbeRun run_site_probe(const std::vector<LabeledVolume>& data, int folds,
                        uint64_t seed) {
  if (folds < 2) throw ConfigError("site probe needs at least 2 folds");
  if (data.empty()) throw ConfigError("site probe needs input volumes");

  int classes = data.front().label.k();
  std::map<int, std::vector<size_t>> by_site;
  for (size_t i = 0; i < data.size(); ++i) {
    const LabelVector& lab = data[i].label;
    if (lab.k() != classes)
      throw ConfigError("site probe labels disagree on site count");
    if (lab.is_agnostic())
      throw ConfigError("site probe needs a site label on every volume");
    by_site[lab.site_index()].push_back(i);
  }
  if (classes < 2 || by_site.size() < 2)
    throw ConfigError("site probe needs at least two sites");
  for (const auto& [site, members] : by_site)
    if (members.size() < 10)
      throw ConfigError("site probe needs at least 10 volumes per site (site " +
                        std::to_string(site) + " has " +
                        std::to_string(members.size()) + ")");

  // Stratified fold assignment: shuffle within each site, deal round-robin.
  Rng rng(seed);
  std::vector<int> fold_of(data.size(), 0);
  for (const auto& [site, members] : by_site) {
    auto perm = rng.permutation(static_cast<int64_t>(members.size()));
    for (size_t i = 0; i < members.size(); ++i)
      fold_of[members[static_cast<size_t>(perm[i])]] =
          static_cast<int>(i % static_cast<size_t>(folds));
  }

  std::vector<std::vector<double>> feats(data.size());
  std::vector<int> labels(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    feats[i] = histogram_features(data[i].volume);
    labels[i] = data[i].label.site_index();
  }

  ProbeRun run;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::vector<double>> train_x;
    std::vector<int> train_y;
    std::vector<size_t> test_idx;
    for (size_t i = 0; i < data.size(); ++i) {
      if (fold_of[i] == f) {
        test_idx.push_back(i);
      } else {
        train_x.push_back(feats[i]);
        train_y.push_back(labels[i]);
      }
    }
    if (train_x.empty() || test_idx.empty())
      throw ConfigError("fold count too high for the corpus size");
    auto w = train_softmax(train_x, train_y, classes);
    int64_t correct = 0;
    for (size_t i : test_idx)
      if (predict(w, classes, feats[i]) == labels[i]) ++correct;
    run.fold_accuracies.push_back(static_cast<double>(correct) /
                                  static_cast<double>(test_idx.size()));
  }
  double total = 0.0;
  for (double a : run.fold_accuracies) total += a;
  run.accuracy = total / static_cast<double>(folds);
  return run;
}

}  // namespace harmon
