#pragma once

#include <vector>

#include "harmon/tensor.hpp"

namespace harmon {

enum class SsimMode { kWindowed, kGlobal };

struct SsimParams {
  // 7^3 Gaussian window, sigma 1.5: the common choice for SSIM local stats.
  int window_radius = 3;
  float window_sigma = 1.5f;
  float k1 = 0.01f;
  float k2 = 0.03f;
  float dynamic_range = 1.0f;  // L; volumes are normalized to [0,1]
  float alpha = 1.0f;
  float beta = 1.0f;
  float gamma = 1.0f;
  SsimMode mode = SsimMode::kWindowed;

  float c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  float c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  float c3() const { return c2() * 0.5f; }
  void validate() const;
};

// Per-window component fields and their means. All tensors live on the
// caller's tape, so every entry is differentiable w.r.t. the inputs.
struct SsimComponents {
  Tensor l_map, c_map, s_map;  // valid-region fields (scalars in global mode)
  Tensor l, c, s;              // spatial means, shape {1}
  Tensor ssim;                 // mean of l_map^alpha * c_map^beta * s_map^gamma
};

// Normalized 1D Gaussian taps for offsets -radius..radius.
std::vector<float> gaussian_window(int radius, float sigma);

// Decomposed similarity: luminance l, contrast c, structure s.
// Windowed mode takes Gaussian-weighted local moments over the valid region
// (no padding); global mode uses whole-volume statistics as one window.
// Inputs are [1,1,D,H,W] or [D,H,W] tensors of matching shape.
SsimComponents ssim_components(Tape& tape, const Tensor& x, const Tensor& y,
                               const SsimParams& params);

// 1 - mean(l^alpha c^beta s^gamma); the training-facing form.
Tensor ssim_loss(Tape& tape, const Tensor& x, const Tensor& y,
                 const SsimParams& params);

// Spatial mean of the single named component map.
Tensor structure_term(Tape& tape, const Tensor& x, const Tensor& y,
                      const SsimParams& params);
Tensor luminance_term(Tape& tape, const Tensor& x, const Tensor& y,
                      const SsimParams& params);

}  // namespace harmon
