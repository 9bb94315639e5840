#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "harmon/tensor.hpp"

namespace harmon {

// Single-channel 3D scalar field. Stored row-major [D][H][W]; W maps to the
// NIfTI x axis (fastest-varying on disk), so payloads copy straight through.
struct Volume {
  int64_t depth = 0, height = 0, width = 0;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm, file order (x,y,z)
  std::vector<float> voxels;
  // min/max of the stored voxels, captured when the volume is (re)built.
  std::pair<float, float> intensity_range{0.0f, 0.0f};
  // Verbatim 348-byte header when loaded from disk; empty for synthetic
  // volumes. Orientation blocks are carried through untouched.
  std::vector<uint8_t> raw_header;

  static Volume create(int64_t d, int64_t h, int64_t w, float fill = 0.0f);

  int64_t numel() const { return depth * height * width; }
  float at(int64_t z, int64_t y, int64_t x) const {
    return voxels[static_cast<size_t>((z * height + y) * width + x)];
  }
  float& at(int64_t z, int64_t y, int64_t x) {
    return voxels[static_cast<size_t>((z * height + y) * width + x)];
  }
  // Recomputes intensity_range; call after bulk voxel edits.
  void update_range();
};

// Length-K vector over {-1,+1}. One +1 marks a scanner site; all -1 is the
// style-agnostic target.
class LabelVector {
public:
  static LabelVector site(int site_index, int k);
  static LabelVector agnostic(int k);
  // Validates entries; rejects values outside {-1,+1} and multiple +1.
  static LabelVector from_entries(std::vector<float> entries);

  int k() const { return static_cast<int>(entries_.size()); }
  // -1 when agnostic.
  int site_index() const;
  bool is_agnostic() const { return site_index() < 0; }
  const std::vector<float>& entries() const { return entries_; }

  bool operator==(const LabelVector& other) const = default;

private:
  std::vector<float> entries_;
};

struct LabeledVolume {
  Volume volume;
  LabelVector label;
  std::string site_name;
};

// Maps the lo/hi percentiles of the voxel distribution onto 0/1 and clamps.
// Percentile ranks floor (lo) and ceil (hi), which makes the map idempotent.
// A constant input yields all zeros and sets *constant_input when provided.
Volume normalize(const Volume& v, float lo_pct, float hi_pct,
                 bool* constant_input = nullptr);

// [1,1,D,H,W] tensor view of the voxel field.
Tensor volume_to_tensor(const Volume& v, bool requires_grad = false);
// Rebuilds a volume from a [1,1,D,H,W] (or [D,H,W]) tensor, inheriting
// spacing and the opaque header from `like`.
Volume tensor_to_volume(const Tensor& t, const Volume& like);

}  // namespace harmon
