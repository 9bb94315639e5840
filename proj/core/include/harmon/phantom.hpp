#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "harmon/volume.hpp"

namespace harmon {

// Parametric scanner-site appearance model applied to a normalized volume:
//   clamp( gain * (blur(v, blur_sigma) * bias(x,y,z))^gamma + noise, 0, 1 )
// in the order blur, bias, gamma, gain, noise.
struct StyleTransform {
  float gain = 1.0f;
  float gamma = 1.0f;
  // Degree-2 trivariate polynomial over coordinates normalized to [-1, 1],
  // monomial order {1, x, y, z, x^2, y^2, z^2, xy, xz, yz}; trailing
  // coefficients may be omitted. {1} is the identity field.
  std::vector<float> bias_field = {1.0f};
  float blur_sigma = 0.0f;
  float noise_sigma = 0.0f;

  void validate() const;
};

struct PhantomConfig {
  std::array<int64_t, 3> extents = {32, 32, 32};
  int64_t subject_count = 20;
  std::vector<std::string> site_names;       // defaults to site0..siteK-1
  std::vector<StyleTransform> sites;         // K >= 2
  std::pair<int, int> blob_range = {3, 8};
  uint64_t seed = 7;

  void validate() const;
};

// The default three-site corpus: a dark/contrasty site, a bright/flat site
// with the opposite bias field, and a neutral site with blur and noise.
PhantomConfig default_phantom_config();

// Single-object JSON round trip for config files. Absent keys keep the
// default corpus values; unknown keys are rejected.
PhantomConfig parse_phantom_config(const std::string& json_text);
std::string phantom_config_json(const PhantomConfig& config);

// Random smoothed ellipsoids composed by maximum, so the three tissue-like
// plateaus (0.25 / 0.55 / 0.85) survive overlaps. Deterministic per seed.
Volume make_anatomy(uint64_t seed, std::array<int64_t, 3> extents,
                    std::pair<int, int> blob_range = {3, 8});

Volume apply_style(const Volume& v, const StyleTransform& t, uint64_t seed);

struct ManifestRecord {
  std::string file;  // relative to the manifest location
  int64_t subject = 0;
  int site = 0;
  std::string site_name;
  StyleTransform transform;  // ground truth for ideal-harmonizer comparisons
};

struct Manifest {
  uint64_t seed = 0;
  std::array<int64_t, 3> extents = {0, 0, 0};
  std::vector<std::string> site_names;
  std::vector<StyleTransform> site_transforms;
  std::vector<ManifestRecord> records;
};

// Renders every subject under every site transform into out_dir as NIfTI
// volumes plus manifest.json.
Manifest generate_corpus(const PhantomConfig& config,
                         const std::filesystem::path& out_dir);

Manifest read_manifest(const std::filesystem::path& manifest_file);

// Serializes in the exact layout generate_corpus produces, so a filtered
// record subset (train/held-out splits) round-trips through read_manifest.
void write_manifest(const Manifest& m,
                    const std::filesystem::path& manifest_file);

// Loads every manifest record and attaches its one-hot site label.
std::vector<LabeledVolume> load_corpus(const std::filesystem::path& manifest_file);

// Stable per-stream seed derivation, used so subject anatomies and per-file
// noise draws stay reproducible independent of generation order.
uint64_t derive_seed(uint64_t base, uint64_t stream);

}  // namespace harmon
