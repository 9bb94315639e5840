#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "harmon/errors.hpp"
#include "harmon/eval.hpp"
#include "harmon/rng.hpp"
#include "harmon/volume.hpp"

using harmon::LabeledVolume;
using harmon::LabelVector;
using harmon::Rng;
using harmon::SiteDistribution;
using harmon::SummaryStat;
using harmon::Volume;
using harmon::w1_distance;

namespace {

// Dyadic samples (multiples of 1/64) with power-of-two sizes keep every
// quantity in the W1 computation exactly representable, so the metric
// axioms can be asserted with zero tolerance.
std::vector<double> dyadic_samples(Rng& rng, int64_t n) {
  std::vector<double> s(static_cast<size_t>(n));
  for (double& v : s) v = static_cast<double>(rng.index(257)) / 64.0;
  return s;
}

// Replicating each sample set to the common size reduces the unequal-size
// path to plain sorted pairing; an independent route to the same integral.
std::vector<double> replicate(const std::vector<double>& s, int64_t times) {
  std::vector<double> out;
  out.reserve(s.size() * static_cast<size_t>(times));
  for (double v : s)
    for (int64_t i = 0; i < times; ++i) out.push_back(v);
  return out;
}

Volume constant_volume(int64_t n, float fill) {
  return Volume::create(n, n, n, fill);
}

LabeledVolume labeled(Volume v, int site, int k) {
  return LabeledVolume{std::move(v), LabelVector::site(site, k),
                       "site" + std::to_string(site)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::filesystem::path fresh_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("w1 pinned values") {
  CHECK(w1_distance({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == 0.0);
  CHECK(w1_distance({0.0}, {3.0}) == 3.0);
  CHECK(w1_distance({0.0, 0.0}, {0.0, 1.0}) == 0.5);
  // Unequal sizes, worked by hand from the quantile functions.
  CHECK(w1_distance({0.0}, {0.0, 1.0}) == 0.5);
  CHECK(w1_distance({1.0, 3.0}, {2.0}) == 1.0);
  CHECK_THROWS_AS((void)w1_distance({}, {1.0}), harmon::ConfigError);
  CHECK_THROWS_AS((void)w1_distance({1.0}, {}), harmon::ConfigError);
}

TEST_CASE("w1 unequal sizes agree with the replication oracle") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    int64_t na = 1 + rng.index(6);
    int64_t nb = 1 + rng.index(6);
    auto a = dyadic_samples(rng, na);
    auto b = dyadic_samples(rng, nb);
    // Equal-size path over the replicated sets computes the same integral.
    CHECK(w1_distance(a, b) == w1_distance(replicate(a, nb), replicate(b, na)));
  }
}

TEST_CASE("w1 equals the best assignment over all pairings") {
  Rng rng(13);
  for (int64_t n : {4, 5, 6}) {
    auto a = dyadic_samples(rng, n);
    auto b = dyadic_samples(rng, n);
    std::vector<size_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    double best = 1e300;
    do {
      double cost = 0.0;
      for (size_t i = 0; i < idx.size(); ++i)
        cost += std::fabs(a[i] - b[idx[i]]);
      best = std::min(best, cost / static_cast<double>(n));
    } while (std::next_permutation(idx.begin(), idx.end()));
    CHECK(w1_distance(a, b) == best);
  }
}

TEST_CASE("w1 metric axioms hold exactly on dyadic triples") {
  Rng rng(17);
  const int64_t sizes[4] = {1, 2, 4, 8};
  for (int rep = 0; rep < 100; ++rep) {
    auto a = dyadic_samples(rng, sizes[rng.index(4)]);
    auto b = dyadic_samples(rng, sizes[rng.index(4)]);
    auto c = dyadic_samples(rng, sizes[rng.index(4)]);
    CHECK(w1_distance(a, a) == 0.0);
    CHECK(w1_distance(a, b) == w1_distance(b, a));
    CHECK(w1_distance(a, c) <= w1_distance(a, b) + w1_distance(b, c));
  }
}

TEST_CASE("w1 translation equivariance") {
  Rng rng(19);
  auto a = dyadic_samples(rng, 8);
  auto b = dyadic_samples(rng, 4);
  const double shift = 2.25;
  auto plus = [&](const std::vector<double>& s) {
    std::vector<double> out(s);
    for (double& v : out) v += shift;
    return out;
  };
  CHECK(w1_distance(plus(a), plus(b)) == w1_distance(a, b));
  CHECK(w1_distance(plus(a), a) == shift);
}

TEST_CASE("volume mean with and without the foreground mask") {
  Volume v = constant_volume(4, 0.5f);
  CHECK(harmon::volume_mean(v) == doctest::Approx(0.5).epsilon(1e-12));

  // Half background below the 0.05 mask threshold, half tissue.
  Volume mixed = constant_volume(4, 0.02f);
  for (int64_t i = 0; i < mixed.numel() / 2; ++i)
    mixed.voxels[static_cast<size_t>(i)] = 0.5f;
  CHECK(harmon::volume_mean(mixed, false) == doctest::Approx(0.26).epsilon(1e-6));
  CHECK(harmon::volume_mean(mixed, true) == doctest::Approx(0.5).epsilon(1e-12));

  Volume dark = constant_volume(4, 0.01f);
  CHECK(harmon::volume_mean(dark, true) == 0.0);
}

TEST_CASE("site mean distributions group by site") {
  std::vector<LabeledVolume> set;
  set.push_back(labeled(constant_volume(4, 0.5f), 1, 2));
  set.push_back(labeled(constant_volume(4, 0.25f), 0, 2));
  set.push_back(labeled(constant_volume(4, 0.75f), 1, 2));
  set.push_back(labeled(constant_volume(4, 0.30f), 0, 2));
  set.push_back(labeled(constant_volume(4, 0.20f), 0, 2));

  auto dists = harmon::site_mean_distributions(set);
  REQUIRE(dists.size() == 2);
  CHECK(dists[0].site_index == 0);
  CHECK(dists[0].samples.size() == 3);
  CHECK(dists[1].site_index == 1);
  CHECK(dists[1].samples.size() == 2);
  CHECK(dists[0].samples[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(dists[1].samples[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("pairwise w1 matrix on toy samples") {
  SiteDistribution a{0, "a", {0.0, 1.0}};
  SiteDistribution b{1, "b", {2.0, 3.0}};
  SiteDistribution c{2, "c", {10.0}};
  auto m = harmon::pairwise_w1_matrix({a, b, c});
  REQUIRE(m.k() == 3);
  for (int i = 0; i < 3; ++i) CHECK(m.at(i, i) == 0.0);
  CHECK(m.at(0, 1) == 2.0);
  CHECK(m.at(1, 0) == 2.0);
  CHECK(m.at(0, 2) == 9.5);
  CHECK(m.at(1, 2) == 7.5);
  CHECK(m.summary.mean == doctest::Approx((2.0 + 9.5 + 7.5) / 3).epsilon(1e-12));
  double mean = (2.0 + 9.5 + 7.5) / 3;
  double var = ((2 - mean) * (2 - mean) + (9.5 - mean) * (9.5 - mean) +
                (7.5 - mean) * (7.5 - mean)) /
               2.0;
  CHECK(m.summary.sd == doctest::Approx(std::sqrt(var)).epsilon(1e-12));

  auto zeros = harmon::pairwise_w1_matrix({a, a});
  CHECK(zeros.at(0, 1) == 0.0);
  CHECK(zeros.summary.mean == 0.0);
  CHECK(zeros.summary.sd == 0.0);  // single pair

  CHECK_THROWS_AS((void)harmon::pairwise_w1_matrix({a}), harmon::ConfigError);
}

TEST_CASE("luminance similarity summary") {
  Rng rng(23);
  Volume v = constant_volume(8, 0.0f);
  for (float& x : v.voxels) x = rng.uniform(0.1f, 0.9f);
  v.update_range();
  std::vector<const Volume*> same = {&v, &v, &v};
  auto s = harmon::luminance_similarity_summary(same);
  CHECK(s.mean == 1.0);
  CHECK(s.sd == 0.0);

  Volume half = constant_volume(8, 0.5f);
  Volume quarter = constant_volume(8, 0.25f);
  auto pairs = harmon::luminance_similarity_summary({&half, &quarter});
  CHECK(pairs.mean == doctest::Approx(0.8001).epsilon(1e-3));
  CHECK(pairs.sd == 0.0);

  Volume other = constant_volume(4, 0.5f);
  CHECK_THROWS_AS(
      (void)harmon::luminance_similarity_summary({&half, &other}),
      harmon::ShapeError);
  CHECK_THROWS_AS((void)harmon::luminance_similarity_summary({&half}),
                  harmon::ConfigError);
}

TEST_CASE("luminance summary is permutation invariant and cap is seeded") {
  Rng rng(29);
  std::vector<Volume> vols;
  for (int i = 0; i < 5; ++i) {
    Volume v = constant_volume(8, 0.0f);
    for (float& x : v.voxels) x = rng.uniform(0.0f, 1.0f);
    v.update_range();
    vols.push_back(std::move(v));
  }
  std::vector<const Volume*> order_a = {&vols[0], &vols[1], &vols[2], &vols[3], &vols[4]};
  std::vector<const Volume*> order_b = {&vols[3], &vols[0], &vols[4], &vols[2], &vols[1]};
  auto sa = harmon::luminance_similarity_summary(order_a);
  auto sb = harmon::luminance_similarity_summary(order_b);
  CHECK(sa.mean == sb.mean);
  CHECK(sa.sd == sb.sd);

  // 10 pairs capped at 4: deterministic per seed, sensitive to the seed.
  auto c1 = harmon::luminance_similarity_summary(order_a, {}, 4, 5);
  auto c2 = harmon::luminance_similarity_summary(order_a, {}, 4, 5);
  CHECK(c1.mean == c2.mean);
  CHECK(c1.sd == c2.sd);
}

TEST_CASE("structural preservation summary") {
  Rng rng(31);
  std::vector<Volume> originals;
  for (int i = 0; i < 3; ++i) {
    Volume v = constant_volume(8, 0.0f);
    for (float& x : v.voxels) x = rng.uniform(0.0f, 1.0f);
    v.update_range();
    originals.push_back(std::move(v));
  }
  std::vector<const Volume*> orig = {&originals[0], &originals[1], &originals[2]};

  // Identity harmonizer scores exactly 1.
  auto ident = harmon::structural_preservation_summary(orig, orig);
  CHECK(ident.mean == 1.0);
  CHECK(ident.sd == 0.0);

  // Voxel-permuted volumes destroy local structure.
  std::vector<Volume> shuffled;
  for (const Volume* v : orig) {
    Volume s = *v;
    auto perm = rng.permutation(s.numel());
    for (int64_t i = 0; i < s.numel(); ++i)
      s.voxels[static_cast<size_t>(i)] =
          v->voxels[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    s.update_range();
    shuffled.push_back(std::move(s));
  }
  std::vector<const Volume*> shuf = {&shuffled[0], &shuffled[1], &shuffled[2]};
  auto collapsed = harmon::structural_preservation_summary(orig, shuf);
  CHECK(collapsed.mean < 0.5);

  std::vector<const Volume*> short_list = {orig[0]};
  CHECK_THROWS_AS(
      (void)harmon::structural_preservation_summary(orig, short_list),
      harmon::ConfigError);
}

TEST_CASE("report emission round-trips and is deterministic") {
  harmon::EvalReport report;
  report.corpus = "corpus-under-test";
  report.timestamp = "2026-01-01T00:00:00Z";
  SiteDistribution a{0, "site0", {0.1, 0.2}};
  SiteDistribution b{1, "site1", {0.3, 0.5}};
  report.pre_sites.whole = {a, b};
  report.pre_sites.foreground = {a, b};
  report.pre_w1 = harmon::pairwise_w1_matrix({a, b});
  report.pre_w1_foreground = report.pre_w1;
  report.pre_luminance = SummaryStat{0.8, 0.05};
  harmon::TargetEval t;
  t.target = "site0";
  t.sites = report.pre_sites;
  t.w1 = report.pre_w1;
  t.w1_foreground = report.pre_w1;
  t.luminance = SummaryStat{0.95, 0.01};
  t.structural = SummaryStat{0.97, 0.01};
  report.targets.push_back(t);

  auto dir1 = fresh_dir("harmon_report_a");
  auto dir2 = fresh_dir("harmon_report_b");
  harmon::emit_report(report, dir1);
  harmon::emit_report(report, dir2);

  auto json_text = slurp(dir1 / "summary.json");
  auto parsed = nlohmann::json::parse(json_text);
  CHECK(parsed.at("schema_version").get<int>() == 1);
  CHECK(parsed.at("pre").at("w1").at("values").size() == 2);
  CHECK(parsed.at("targets").size() == 1);
  // Re-serialization equals a fresh dump of the parsed tree.
  CHECK(nlohmann::json::parse(json_text).dump(2) == parsed.dump(2));

  CHECK(json_text == slurp(dir2 / "summary.json"));
  CHECK(slurp(dir1 / "w1_pre.csv") == slurp(dir2 / "w1_pre.csv"));

  // Matrix CSV has a header plus K rows, each with K+1 fields.
  std::istringstream csv(slurp(dir1 / "w1_post_site0.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    CHECK(std::count(line.begin(), line.end(), ',') == 2);
    ++rows;
  }
  CHECK(rows == 3);

  CHECK(std::filesystem::exists(dir1 / "samples_pre_site0.csv"));
  CHECK(std::filesystem::exists(dir1 / "samples_pre_foreground_site1.csv"));
  CHECK(std::filesystem::exists(dir1 / "samples_post_site0_site1.csv"));

  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
}

}  // TEST_SUITE
