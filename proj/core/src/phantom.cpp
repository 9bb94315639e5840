#include "harmon/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "harmon/errors.hpp"
#include "harmon/nifti.hpp"
#include "harmon/rng.hpp"

namespace harmon {

namespace {

constexpr size_t kBiasTerms = 10;

void check_finite(float v, const char* what) {
  if (!std::isfinite(v)) throw ConfigError(std::string(what) + " must be finite");
}

// Trivariate degree-2 monomials over [-1,1]^3 in the documented order.
double bias_value(const std::vector<float>& coeffs, double x, double y, double z) {
  const double terms[kBiasTerms] = {1.0, x,     y,     z,     x * x,
                                    y * y, z * z, x * y, x * z, y * z};
  double acc = 0.0;
  for (size_t i = 0; i < coeffs.size(); ++i) acc += coeffs[i] * terms[i];
  return acc;
}

void blur_axis(std::vector<double>& data, int64_t d, int64_t h, int64_t w,
               int axis, const std::vector<double>& kernel) {
  int radius = static_cast<int>(kernel.size() / 2);
  std::vector<double> out(data.size());
  int64_t extent = axis == 0 ? d : axis == 1 ? h : w;
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          int64_t pos = axis == 0 ? z : axis == 1 ? y : x;
          int64_t p = std::clamp<int64_t>(pos + t, 0, extent - 1);
          int64_t zz = axis == 0 ? p : z;
          int64_t yy = axis == 1 ? p : y;
          int64_t xx = axis == 2 ? p : x;
          acc += kernel[static_cast<size_t>(t + radius)] *
                 data[static_cast<size_t>((zz * h + yy) * w + xx)];
        }
        out[static_cast<size_t>((z * h + y) * w + x)] = acc;
      }
  data = std::move(out);
}

std::vector<double> blur_kernel(float sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] =
        std::exp(-static_cast<double>(i) * i / (2.0 * sigma * sigma));
    total += k[static_cast<size_t>(i + radius)];
  }
  for (double& v : k) v /= total;
  return k;
}

nlohmann::json transform_json(const StyleTransform& t) {
  return {{"gain", t.gain},
          {"gamma", t.gamma},
          {"bias_field", t.bias_field},
          {"blur_sigma", t.blur_sigma},
          {"noise_sigma", t.noise_sigma}};
}

StyleTransform transform_from_json(const nlohmann::json& j) {
  StyleTransform t;
  t.gain = j.at("gain").get<float>();
  t.gamma = j.at("gamma").get<float>();
  t.bias_field = j.at("bias_field").get<std::vector<float>>();
  t.blur_sigma = j.at("blur_sigma").get<float>();
  t.noise_sigma = j.at("noise_sigma").get<float>();
  t.validate();
  return t;
}

std::string volume_file_name(int64_t subject, int site) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "sub%03d_site%d.nii",
                static_cast<int>(subject), site);
  return buf;
}

}  // namespace

void StyleTransform::validate() const {
  check_finite(gain, "gain");
  check_finite(gamma, "gamma");
  check_finite(blur_sigma, "blur_sigma");
  check_finite(noise_sigma, "noise_sigma");
  if (gain <= 0.0f) throw ConfigError("gain must be positive");
  if (gamma <= 0.0f) throw ConfigError("gamma must be positive");
  if (blur_sigma < 0.0f) throw ConfigError("blur_sigma must be nonnegative");
  if (noise_sigma < 0.0f) throw ConfigError("noise_sigma must be nonnegative");
  if (bias_field.empty())
    throw ConfigError("bias field needs at least the constant coefficient");
  if (bias_field.size() > kBiasTerms)
    throw ConfigError("bias field has more than 10 coefficients");
  for (float c : bias_field) check_finite(c, "bias coefficient");
}

void PhantomConfig::validate() const {
  for (int64_t e : extents)
    if (e < 16) throw ConfigError("extents too small (minimum 16 per axis)");
  if (subject_count < 2) throw ConfigError("subject count must be at least 2");
  if (sites.size() < 2) throw ConfigError("site count must be at least 2");
  if (!site_names.empty() && site_names.size() != sites.size())
    throw ConfigError("site_names must match the site count");
  if (blob_range.first < 1 || blob_range.second < blob_range.first)
    throw ConfigError("invalid blob count range");
  for (const auto& t : sites) t.validate();
}

PhantomConfig default_phantom_config() {
  PhantomConfig cfg;
  StyleTransform dark;
  dark.gain = 0.85f;
  dark.gamma = 1.2f;
  dark.bias_field = {1.0f, 0.06f, 0.04f, -0.05f, 0.02f, -0.02f, 0.01f};
  StyleTransform bright;
  bright.gain = 1.15f;
  bright.gamma = 0.9f;
  bright.bias_field = {1.0f, -0.06f, -0.04f, 0.05f, -0.02f, 0.02f, -0.01f};
  StyleTransform blurry;
  blurry.blur_sigma = 0.5f;
  blurry.noise_sigma = 0.02f;
  cfg.sites = {dark, bright, blurry};
  cfg.site_names = {"site0", "site1", "site2"};
  return cfg;
}

PhantomConfig parse_phantom_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("phantom config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) {
    throw FormatError("phantom config: expected a JSON object");
  }
  static const char* kKeys[] = {"extents",    "subject_count", "site_names",
                                "sites",      "blob_range",    "seed"};
  for (const auto& [key, unused] : j.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) {
      throw FormatError("phantom config: unknown key \"" + key + "\"");
    }
  }
  PhantomConfig cfg = default_phantom_config();
  try {
    if (j.contains("extents")) {
      const auto e = j["extents"].get<std::vector<int64_t>>();
      if (e.size() != 3) {
        throw FormatError("phantom config: extents needs exactly 3 entries");
      }
      cfg.extents = {e[0], e[1], e[2]};
    }
    if (j.contains("subject_count")) {
      cfg.subject_count = j["subject_count"].get<int64_t>();
    }
    if (j.contains("site_names")) {
      cfg.site_names = j["site_names"].get<std::vector<std::string>>();
    }
    if (j.contains("sites")) {
      cfg.sites.clear();
      for (const auto& site : j["sites"]) {
        if (!site.is_object()) {
          throw FormatError("phantom config: each site must be an object");
        }
        static const char* kSiteKeys[] = {"gain", "gamma", "bias_field",
                                          "blur_sigma", "noise_sigma"};
        for (const auto& [key, unused] : site.items()) {
          bool known = false;
          for (const char* k : kSiteKeys) known = known || key == k;
          if (!known) {
            throw FormatError("phantom config: unknown site key \"" + key +
                              "\"");
          }
        }
        StyleTransform t;
        if (site.contains("gain")) t.gain = site["gain"].get<float>();
        if (site.contains("gamma")) t.gamma = site["gamma"].get<float>();
        if (site.contains("bias_field")) {
          t.bias_field = site["bias_field"].get<std::vector<float>>();
        }
        if (site.contains("blur_sigma")) {
          t.blur_sigma = site["blur_sigma"].get<float>();
        }
        if (site.contains("noise_sigma")) {
          t.noise_sigma = site["noise_sigma"].get<float>();
        }
        cfg.sites.push_back(std::move(t));
      }
    }
    if (j.contains("blob_range")) {
      const auto r = j["blob_range"].get<std::vector<int>>();
      if (r.size() != 2) {
        throw FormatError("phantom config: blob_range needs exactly 2 entries");
      }
      cfg.blob_range = {r[0], r[1]};
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("phantom config: mistyped field: ") +
                      e.what());
  }
  cfg.validate();
  return cfg;
}

std::string phantom_config_json(const PhantomConfig& config) {
  nlohmann::json j;
  j["extents"] = config.extents;
  j["subject_count"] = config.subject_count;
  j["site_names"] = config.site_names;
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& t : config.sites) sites.push_back(transform_json(t));
  j["sites"] = sites;
  j["blob_range"] = {config.blob_range.first, config.blob_range.second};
  j["seed"] = config.seed;
  return j.dump(2);
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Volume make_anatomy(uint64_t seed, std::array<int64_t, 3> extents,
                    std::pair<int, int> blob_range) {
  for (int64_t e : extents)
    if (e < 16) throw ConfigError("extents too small (minimum 16 per axis)");
  if (blob_range.first < 1 || blob_range.second < blob_range.first)
    throw ConfigError("invalid blob count range");

  const float plateaus[3] = {0.25f, 0.55f, 0.85f};
  Rng rng(seed);
  int count = blob_range.first +
              static_cast<int>(rng.index(blob_range.second - blob_range.first + 1));
  auto plateau_order = rng.permutation(3);

  Volume v = Volume::create(extents[0], extents[1], extents[2], 0.0f);
  for (int blob = 0; blob < count; ++blob) {
    double c[3], s[3];
    for (int a = 0; a < 3; ++a)
      c[a] = rng.uniform(0.25f, 0.75f) * static_cast<double>(extents[a] - 1);
    // Sized so a handful of blobs fills a solid fraction of the field of
    // view; site contrast effects on the whole-volume mean scale with it.
    for (int a = 0; a < 3; ++a)
      s[a] = rng.uniform(0.2f, 0.4f) * static_cast<double>(extents[a]);
    float level = blob < 3
                      ? plateaus[plateau_order[static_cast<size_t>(blob)]]
                      : plateaus[rng.index(3)];

    int64_t lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c[a] - s[a])));
      hi[a] = std::min<int64_t>(extents[a] - 1,
                                static_cast<int64_t>(std::ceil(c[a] + s[a])));
    }
    for (int64_t z = lo[0]; z <= hi[0]; ++z)
      for (int64_t y = lo[1]; y <= hi[1]; ++y)
        for (int64_t x = lo[2]; x <= hi[2]; ++x) {
          double dz = (z - c[0]) / s[0];
          double dy = (y - c[1]) / s[1];
          double dx = (x - c[2]) / s[2];
          double r = std::sqrt(dz * dz + dy * dy + dx * dx);
          if (r >= 1.0) continue;
          // Plateau out to 70% of the radius, smoothstep falloff beyond.
          double falloff = 1.0;
          if (r > 0.7) {
            double t = (r - 0.7) / 0.3;
            falloff = 1.0 - t * t * (3.0 - 2.0 * t);
          }
          float& cell = v.at(z, y, x);
          cell = std::max(cell, static_cast<float>(level * falloff));
        }
  }
  v.update_range();
  return v;
}

Volume apply_style(const Volume& v, const StyleTransform& t, uint64_t seed) {
  t.validate();
  if (v.numel() <= 0) throw ConfigError("apply_style: empty volume");
  if (v.intensity_range.first < -1e-6f || v.intensity_range.second > 1.0f + 1e-6f)
    throw ConfigError("apply_style expects a normalized volume in [0, 1]");

  std::vector<double> work(v.voxels.begin(), v.voxels.end());
  int64_t d = v.depth, h = v.height, w = v.width;

  if (t.blur_sigma > 0.0f) {
    auto kernel = blur_kernel(t.blur_sigma);
    for (int axis = 0; axis < 3; ++axis) blur_axis(work, d, h, w, axis, kernel);
  }

  bool identity_bias = t.bias_field.size() == 1 && t.bias_field[0] == 1.0f;
  if (!identity_bias) {
    size_t idx = 0;
    for (int64_t z = 0; z < d; ++z) {
      double zn = d > 1 ? 2.0 * z / (d - 1) - 1.0 : 0.0;
      for (int64_t y = 0; y < h; ++y) {
        double yn = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
        for (int64_t x = 0; x < w; ++x, ++idx) {
          double xn = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
          work[idx] *= bias_value(t.bias_field, xn, yn, zn);
        }
      }
    }
  }

  if (t.gamma != 1.0f)
    for (double& val : work) val = std::pow(std::max(val, 0.0), t.gamma);

  if (t.gain != 1.0f)
    for (double& val : work) val *= t.gain;

  if (t.noise_sigma > 0.0f) {
    Rng rng(seed);
    for (double& val : work) val += rng.normal(0.0f, t.noise_sigma);
  }

  Volume out = v;
  for (size_t i = 0; i < work.size(); ++i)
    out.voxels[i] = static_cast<float>(std::clamp(work[i], 0.0, 1.0));
  out.update_range();
  return out;
}

Manifest generate_corpus(const PhantomConfig& config,
                         const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());

  Manifest m;
  m.seed = config.seed;
  m.extents = config.extents;
  m.site_transforms = config.sites;
  if (config.site_names.empty()) {
    for (size_t k = 0; k < config.sites.size(); ++k)
      m.site_names.push_back("site" + std::to_string(k));
  } else {
    m.site_names = config.site_names;
  }

  int sites = static_cast<int>(config.sites.size());
  for (int64_t subject = 0; subject < config.subject_count; ++subject) {
    // Even streams seed anatomies, odd streams seed per-file noise, so
    // adding sites never perturbs existing subjects.
    Volume anatomy = make_anatomy(derive_seed(config.seed, 2 * static_cast<uint64_t>(subject)),
                                  config.extents, config.blob_range);
    for (int site = 0; site < sites; ++site) {
      uint64_t noise_seed = derive_seed(
          config.seed,
          2 * (static_cast<uint64_t>(subject) * static_cast<uint64_t>(sites) +
               static_cast<uint64_t>(site)) + 1);
      Volume styled = apply_style(anatomy, config.sites[static_cast<size_t>(site)],
                                  noise_seed);
      ManifestRecord rec;
      rec.file = volume_file_name(subject, site);
      rec.subject = subject;
      rec.site = site;
      rec.site_name = m.site_names[static_cast<size_t>(site)];
      rec.transform = config.sites[static_cast<size_t>(site)];
      write_nifti(styled, (out_dir / rec.file).string());
      m.records.push_back(std::move(rec));
    }
  }

  write_manifest(m, out_dir / "manifest.json");
  return m;
}

void write_manifest(const Manifest& m,
                    const std::filesystem::path& manifest_file) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seed"] = m.seed;
  j["extents"] = m.extents;
  nlohmann::json sites_j = nlohmann::json::array();
  for (size_t k = 0; k < m.site_transforms.size(); ++k)
    sites_j.push_back({{"name", m.site_names[k]},
                       {"transform", transform_json(m.site_transforms[k])}});
  j["sites"] = sites_j;
  nlohmann::json records = nlohmann::json::array();
  for (const auto& rec : m.records)
    records.push_back({{"file", rec.file},
                       {"subject", rec.subject},
                       {"site", rec.site},
                       {"site_name", rec.site_name},
                       {"transform", transform_json(rec.transform)}});
  j["records"] = records;

  std::ofstream os(manifest_file);
  if (!os) throw IoError("cannot write " + manifest_file.string());
  os << j.dump(2) << "\n";
}

Manifest read_manifest(const std::filesystem::path& manifest_file) {
  std::ifstream is(manifest_file);
  if (!is) throw IoError("cannot open " + manifest_file.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  try {
    if (j.at("schema_version").get<int>() != 1)
      throw FormatError("unsupported manifest schema version");
    Manifest m;
    m.seed = j.at("seed").get<uint64_t>();
    auto ext = j.at("extents").get<std::vector<int64_t>>();
    if (ext.size() != 3) throw FormatError("manifest extents must have 3 axes");
    std::copy(ext.begin(), ext.end(), m.extents.begin());
    for (const auto& site : j.at("sites")) {
      m.site_names.push_back(site.at("name").get<std::string>());
      m.site_transforms.push_back(transform_from_json(site.at("transform")));
    }
    if (m.site_names.empty()) throw FormatError("manifest lists no sites");
    for (const auto& rec_j : j.at("records")) {
      ManifestRecord rec;
      rec.file = rec_j.at("file").get<std::string>();
      rec.subject = rec_j.at("subject").get<int64_t>();
      rec.site = rec_j.at("site").get<int>();
      rec.site_name = rec_j.at("site_name").get<std::string>();
      rec.transform = transform_from_json(rec_j.at("transform"));
      if (rec.site < 0 || rec.site >= static_cast<int>(m.site_names.size()))
        throw FormatError("manifest record site index out of range");
      m.records.push_back(std::move(rec));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest: " + std::string(e.what()));
  }
}

std::vector<LabeledVolume> load_corpus(const std::filesystem::path& manifest_file) {
  Manifest m = read_manifest(manifest_file);
  std::filesystem::path base = manifest_file.parent_path();
  int k = static_cast<int>(m.site_names.size());
  std::vector<LabeledVolume> out;
  out.reserve(m.records.size());
  for (const auto& rec : m.records) {
    LabeledVolume lv{read_nifti((base / rec.file).string()),
                     LabelVector::site(rec.site, k), rec.site_name};
    out.push_back(std::move(lv));
  }
  return out;
}

}  // namespace harmon
