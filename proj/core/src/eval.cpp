#include "harmon/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "harmon/errors.hpp"
#include "harmon/rng.hpp"
#include "harmon/tensor.hpp"

namespace harmon {

namespace {

// Values are sorted before aggregation so summaries do not depend on the
// order pairs were produced in.
SummaryStat summarize(std::vector<double> values) {
  SummaryStat s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double acc = 0.0;
    for (double v : values) acc += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(acc / static_cast<double>(values.size() - 1));
  }
  return s;
}

void check_samples(const std::vector<double>& s, const char* side) {
  if (s.empty())
    throw ConfigError(std::string("w1_distance: ") + side + " sample set is empty");
  for (double v : s)
    if (!std::isfinite(v))
      throw NumericError(std::string("w1_distance: non-finite sample on ") + side);
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name)
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
  return out.empty() ? std::string("unnamed") : out;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << std::setprecision(17);
  return os;
}

void write_matrix_csv(const std::filesystem::path& p, const W1Matrix& m) {
  auto os = open_out(p);
  os << "site";
  for (const auto& n : m.site_names) os << "," << n;
  os << "\n";
  for (int i = 0; i < m.k(); ++i) {
    os << m.site_names[static_cast<size_t>(i)];
    for (int j = 0; j < m.k(); ++j) os << "," << m.at(i, j);
    os << "\n";
  }
}

void write_sample_csvs(const std::filesystem::path& dir, const std::string& label,
                       const SiteDistributionSet& set) {
  auto write_one = [&](const SiteDistribution& d, const std::string& suffix) {
    auto os = open_out(dir / ("samples_" + label + suffix + "_" +
                              sanitize(d.site_name) + ".csv"));
    os << "index,mean_intensity\n";
    for (size_t i = 0; i < d.samples.size(); ++i)
      os << i << "," << d.samples[i] << "\n";
  };
  for (const auto& d : set.whole) write_one(d, "");
  for (const auto& d : set.foreground) write_one(d, "_foreground");
}

nlohmann::json summary_json(const SummaryStat& s) {
  return {{"mean", s.mean}, {"sd", s.sd}};
}

nlohmann::json matrix_json(const W1Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.k(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.k(); ++j) row.push_back(m.at(i, j));
    rows.push_back(row);
  }
  return {{"sites", m.site_names}, {"values", rows}, {"summary", summary_json(m.summary)}};
}

nlohmann::json sites_json(const SiteDistributionSet& set) {
  auto one = [](const std::vector<SiteDistribution>& ds) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : ds)
      arr.push_back({{"site", d.site_index},
                     {"name", d.site_name},
                     {"samples", d.samples}});
    return arr;
  };
  return {{"whole", one(set.whole)}, {"foreground", one(set.foreground)}};
}

nlohmann::json probe_run_json(const ProbeRun& r) {
  return {{"accuracy", r.accuracy}, {"fold_accuracies", r.fold_accuracies}};
}

}  // namespace

double w1_distance(const std::vector<double>& a, const std::vector<double>& b) {
  check_samples(a, "left");
  check_samples(b, "right");
  std::vector<double> sa(a), sb(b);
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());

  int64_t na = static_cast<int64_t>(sa.size());
  int64_t nb = static_cast<int64_t>(sb.size());
  if (na == nb) {
    double acc = 0.0;
    for (int64_t i = 0; i < na; ++i)
      acc += std::fabs(sa[static_cast<size_t>(i)] - sb[static_cast<size_t>(i)]);
    return acc / static_cast<double>(na);
  }

  // Unequal sizes: integrate |F_a^-1 - F_b^-1| over the merged quantile
  // grid. Segment masses are exact integers over the common denominator
  // na*nb, so the result is the exact integral of the step functions.
  if (na > std::numeric_limits<int64_t>::max() / nb)
    throw ConfigError("w1_distance: sample sets too large");
  int64_t total = na * nb;
  double acc = 0.0;
  int64_t u = 0, i = 0, j = 0;
  while (u < total) {
    int64_t next_a = (i + 1) * nb;
    int64_t next_b = (j + 1) * na;
    int64_t next = std::min(next_a, next_b);
    acc += std::fabs(sa[static_cast<size_t>(i)] - sb[static_cast<size_t>(j)]) *
           static_cast<double>(next - u);
    if (next == next_a) ++i;
    if (next == next_b) ++j;
    u = next;
  }
  return acc / static_cast<double>(total);
}

double volume_mean(const Volume& v, bool foreground_only) {
  if (v.numel() <= 0) throw ConfigError("volume_mean: empty volume");
  double acc = 0.0;
  int64_t count = 0;
  for (float x : v.voxels) {
    if (foreground_only && !(x > 0.05f)) continue;
    acc += x;
    ++count;
  }
  return count > 0 ? acc / static_cast<double>(count) : 0.0;
}

std::vector<SiteDistribution> site_mean_distributions(
    const std::vector<LabeledVolume>& set, bool foreground_only) {
  std::map<int, SiteDistribution> by_site;
  for (const auto& lv : set) {
    if (lv.label.is_agnostic())
      throw ConfigError("site_mean_distributions: volume without a site label");
    auto& d = by_site[lv.label.site_index()];
    if (d.samples.empty()) {
      d.site_index = lv.label.site_index();
      d.site_name = lv.site_name.empty()
                        ? "site" + std::to_string(lv.label.site_index())
                        : lv.site_name;
    }
    d.samples.push_back(volume_mean(lv.volume, foreground_only));
  }
  std::vector<SiteDistribution> out;
  out.reserve(by_site.size());
  for (auto& [site, d] : by_site) out.push_back(std::move(d));
  return out;
}

W1Matrix pairwise_w1_matrix(const std::vector<SiteDistribution>& dists) {
  if (dists.size() < 2)
    throw ConfigError("pairwise_w1_matrix: need at least two sites");
  W1Matrix m;
  size_t k = dists.size();
  for (const auto& d : dists) m.site_names.push_back(d.site_name);
  m.values.assign(k * k, 0.0);
  std::vector<double> upper;
  for (size_t i = 0; i < k; ++i)
    for (size_t j = i + 1; j < k; ++j) {
      double d = w1_distance(dists[i].samples, dists[j].samples);
      m.values[i * k + j] = d;
      m.values[j * k + i] = d;
      upper.push_back(d);
    }
  m.summary = summarize(std::move(upper));
  return m;
}

SummaryStat luminance_similarity_summary(const std::vector<const Volume*>& volumes,
                                         const SsimParams& params,
                                         int64_t pair_cap, uint64_t seed) {
  if (volumes.size() < 2)
    throw ConfigError("luminance_similarity_summary: need at least two volumes");
  if (pair_cap < 1)
    throw ConfigError("luminance_similarity_summary: pair cap must be positive");
  const Volume* first = volumes.front();
  for (const Volume* v : volumes)
    if (v->depth != first->depth || v->height != first->height ||
        v->width != first->width)
      throw ShapeError("luminance_similarity_summary: volume extents differ");

  std::vector<std::pair<size_t, size_t>> pairs;
  for (size_t i = 0; i < volumes.size(); ++i)
    for (size_t j = i + 1; j < volumes.size(); ++j) pairs.emplace_back(i, j);
  if (static_cast<int64_t>(pairs.size()) > pair_cap) {
    Rng rng(seed);
    auto perm = rng.permutation(static_cast<int64_t>(pairs.size()));
    std::vector<std::pair<size_t, size_t>> chosen;
    chosen.reserve(static_cast<size_t>(pair_cap));
    for (int64_t i = 0; i < pair_cap; ++i)
      chosen.push_back(pairs[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    pairs = std::move(chosen);
  }

  std::vector<double> values;
  values.reserve(pairs.size());
  Tape tape;
  tape.set_recording(false);
  for (auto [i, j] : pairs) {
    Tensor x = volume_to_tensor(*volumes[i]);
    Tensor y = volume_to_tensor(*volumes[j]);
    values.push_back(luminance_term(tape, x, y, params).scalar());
  }
  return summarize(std::move(values));
}

SummaryStat structural_preservation_summary(
    const std::vector<const Volume*>& originals,
    const std::vector<const Volume*>& harmonized, const SsimParams& params) {
  if (originals.empty())
    throw ConfigError("structural_preservation_summary: empty input");
  if (originals.size() != harmonized.size())
    throw ConfigError(
        "structural_preservation_summary: need exactly one harmonized volume "
        "per original");
  std::vector<double> values;
  values.reserve(originals.size());
  Tape tape;
  tape.set_recording(false);
  for (size_t i = 0; i < originals.size(); ++i) {
    const Volume* a = originals[i];
    const Volume* b = harmonized[i];
    if (a->depth != b->depth || a->height != b->height || a->width != b->width)
      throw ShapeError("structural_preservation_summary: pair extents differ");
    Tensor x = volume_to_tensor(*a);
    Tensor y = volume_to_tensor(*b);
    values.push_back(structure_term(tape, x, y, params).scalar());
  }
  return summarize(std::move(values));
}

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());

  nlohmann::json j;
  j["schema_version"] = 1;
  j["corpus"] = report.corpus;
  j["timestamp"] = report.timestamp;
  j["pre"] = {{"w1", matrix_json(report.pre_w1)},
              {"w1_foreground", matrix_json(report.pre_w1_foreground)},
              {"luminance", summary_json(report.pre_luminance)},
              {"sites", sites_json(report.pre_sites)}};
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : report.targets)
    targets.push_back({{"target", t.target},
                       {"w1", matrix_json(t.w1)},
                       {"w1_foreground", matrix_json(t.w1_foreground)},
                       {"luminance", summary_json(t.luminance)},
                       {"structural", summary_json(t.structural)},
                       {"sites", sites_json(t.sites)}});
  j["targets"] = targets;
  if (report.probe) {
    j["site_probe"] = {{"raw", probe_run_json(report.probe->raw)},
                       {"harmonized", probe_run_json(report.probe->harmonized)},
                       {"chance", report.probe->chance},
                       {"folds", report.probe->folds}};
  }
  {
    auto os = open_out(out_dir / "summary.json");
    os << j.dump(2) << "\n";
  }

  write_matrix_csv(out_dir / "w1_pre.csv", report.pre_w1);
  write_matrix_csv(out_dir / "w1_pre_foreground.csv", report.pre_w1_foreground);
  write_sample_csvs(out_dir, "pre", report.pre_sites);
  for (const auto& t : report.targets) {
    // A single anonymous target keeps the plain w1_post.csv name.
    std::string tag = t.target.empty() ? "" : "_" + sanitize(t.target);
    write_matrix_csv(out_dir / ("w1_post" + tag + ".csv"), t.w1);
    write_matrix_csv(out_dir / ("w1_post" + tag + "_foreground.csv"),
                     t.w1_foreground);
    write_sample_csvs(out_dir, "post" + tag, t.sites);
  }
}

}  // namespace harmon
