#include "harmon/volume.hpp"

#include <algorithm>
#include <cmath>

#include "harmon/errors.hpp"

namespace harmon {

Volume Volume::create(int64_t d, int64_t h, int64_t w, float fill) {
  if (d <= 0 || h <= 0 || w <= 0) {
    throw ShapeError("Volume::create: extents must be positive");
  }
  Volume v;
  v.depth = d;
  v.height = h;
  v.width = w;
  v.voxels.assign(static_cast<size_t>(d * h * w), fill);
  v.intensity_range = {fill, fill};
  return v;
}

void Volume::update_range() {
  if (voxels.empty()) {
    intensity_range = {0.0f, 0.0f};
    return;
  }
  auto [lo, hi] = std::minmax_element(voxels.begin(), voxels.end());
  intensity_range = {*lo, *hi};
}

LabelVector LabelVector::site(int site_index, int k) {
  if (k <= 0) throw ConfigError("LabelVector: K must be positive");
  if (site_index < 0 || site_index >= k) {
    throw ConfigError("LabelVector: site index " + std::to_string(site_index) +
                      " out of range for K=" + std::to_string(k));
  }
  LabelVector l;
  l.entries_.assign(static_cast<size_t>(k), -1.0f);
  l.entries_[static_cast<size_t>(site_index)] = 1.0f;
  return l;
}

LabelVector LabelVector::agnostic(int k) {
  if (k <= 0) throw ConfigError("LabelVector: K must be positive");
  LabelVector l;
  l.entries_.assign(static_cast<size_t>(k), -1.0f);
  return l;
}

LabelVector LabelVector::from_entries(std::vector<float> entries) {
  if (entries.empty()) throw ConfigError("LabelVector: empty entries");
  int plus = 0;
  for (float e : entries) {
    if (e != 1.0f && e != -1.0f) {
      throw ConfigError("LabelVector: entries must be exactly -1 or +1");
    }
    if (e == 1.0f) ++plus;
  }
  if (plus > 1) throw ConfigError("LabelVector: more than one +1 entry");
  LabelVector l;
  l.entries_ = std::move(entries);
  return l;
}

int LabelVector::site_index() const {
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i] == 1.0f) return static_cast<int>(i);
  }
  return -1;
}

Volume normalize(const Volume& v, float lo_pct, float hi_pct,
                 bool* constant_input) {
  if (!(lo_pct >= 0.0f && lo_pct < hi_pct && hi_pct <= 1.0f)) {
    throw ConfigError("normalize: need 0 <= lo_pct < hi_pct <= 1");
  }
  if (v.voxels.empty()) throw ShapeError("normalize: empty volume");
  if (constant_input) *constant_input = false;

  std::vector<float> sorted(v.voxels);
  std::sort(sorted.begin(), sorted.end());
  auto n = static_cast<int64_t>(sorted.size());
  auto lo_idx = static_cast<int64_t>(
      std::floor(static_cast<double>(lo_pct) * static_cast<double>(n - 1)));
  auto hi_idx = static_cast<int64_t>(
      std::ceil(static_cast<double>(hi_pct) * static_cast<double>(n - 1)));
  float lo = sorted[static_cast<size_t>(lo_idx)];
  float hi = sorted[static_cast<size_t>(hi_idx)];

  Volume out = v;
  if (lo == hi) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    out.intensity_range = {0.0f, 0.0f};
    if (constant_input) *constant_input = true;
    return out;
  }
  float scale = 1.0f / (hi - lo);
  for (float& x : out.voxels) {
    x = std::clamp((x - lo) * scale, 0.0f, 1.0f);
  }
  out.update_range();
  return out;
}

Tensor volume_to_tensor(const Volume& v, bool requires_grad) {
  if (v.voxels.empty()) throw ShapeError("volume_to_tensor: empty volume");
  return Tensor::from_data({1, 1, v.depth, v.height, v.width}, v.voxels,
                           requires_grad);
}

Volume tensor_to_volume(const Tensor& t, const Volume& like) {
  const Shape& s = t.shape();
  int64_t d = 0, h = 0, w = 0;
  if (s.size() == 5 && s[0] == 1 && s[1] == 1) {
    d = s[2];
    h = s[3];
    w = s[4];
  } else if (s.size() == 3) {
    d = s[0];
    h = s[1];
    w = s[2];
  } else {
    throw ShapeError("tensor_to_volume: expected [1,1,D,H,W] or [D,H,W], got " +
                     shape_to_string(s));
  }
  Volume v;
  v.depth = d;
  v.height = h;
  v.width = w;
  v.spacing = like.spacing;
  v.raw_header = like.raw_header;
  v.voxels.assign(t.value().begin(), t.value().end());
  v.update_range();
  return v;
}

}  // namespace harmon
