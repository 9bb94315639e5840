#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "harmon/ssim.hpp"

namespace testutil {

struct SsimRef {
  double l, c, s, ssim;
};

// Independent oracle: direct (non-separable) Gaussian window in windowed
// mode, whole-volume moments in global mode. Double arithmetic throughout,
// population statistics, exponents fixed at 1.
inline SsimRef ssim_reference(const std::vector<double>& x,
                              const std::vector<double>& y, int64_t D,
                              int64_t H, int64_t W,
                              const harmon::SsimParams& p) {
  double C1 = static_cast<double>(p.k1) * p.dynamic_range;
  C1 *= C1;
  double C2 = static_cast<double>(p.k2) * p.dynamic_range;
  C2 *= C2;
  double C3 = C2 / 2.0;

  auto component = [&](double mx, double my, double vx, double vy,
                       double cov) {
    vx = std::max(0.0, vx);
    vy = std::max(0.0, vy);
    double sx = std::sqrt(vx), sy = std::sqrt(vy);
    double l = (2 * mx * my + C1) / (mx * mx + my * my + C1);
    double c = (2 * sx * sy + C2) / (vx + vy + C2);
    double s = (cov + C3) / (sx * sy + C3);
    return SsimRef{l, c, s, l * c * s};
  };

  if (p.mode == harmon::SsimMode::kGlobal) {
    double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
    double n = static_cast<double>(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
      mx += x[i];
      my += y[i];
      mxx += x[i] * x[i];
      myy += y[i] * y[i];
      mxy += x[i] * y[i];
    }
    mx /= n;
    my /= n;
    mxx /= n;
    myy /= n;
    mxy /= n;
    return component(mx, my, mxx - mx * mx, myy - my * my, mxy - mx * my);
  }

  int radius = p.window_radius;
  double sigma = p.window_sigma;
  int k = 2 * radius + 1;
  std::vector<double> w1(static_cast<size_t>(k));
  double tot = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w1[static_cast<size_t>(i + radius)] =
        std::exp(-i * i / (2.0 * sigma * sigma));
    tot += w1[static_cast<size_t>(i + radius)];
  }
  for (double& v : w1) v /= tot;

  auto at = [&](const std::vector<double>& v, int64_t z, int64_t yy,
                int64_t xx) {
    return v[static_cast<size_t>((z * H + yy) * W + xx)];
  };

  SsimRef acc{0, 0, 0, 0};
  int64_t count = 0;
  for (int64_t cz = radius; cz < D - radius; ++cz)
    for (int64_t cy = radius; cy < H - radius; ++cy)
      for (int64_t cx = radius; cx < W - radius; ++cx) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int dz = -radius; dz <= radius; ++dz)
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              double wgt = w1[static_cast<size_t>(dz + radius)] *
                           w1[static_cast<size_t>(dy + radius)] *
                           w1[static_cast<size_t>(dx + radius)];
              double xv = at(x, cz + dz, cy + dy, cx + dx);
              double yv = at(y, cz + dz, cy + dy, cx + dx);
              mx += wgt * xv;
              my += wgt * yv;
              mxx += wgt * xv * xv;
              myy += wgt * yv * yv;
              mxy += wgt * xv * yv;
            }
        SsimRef one =
            component(mx, my, mxx - mx * mx, myy - my * my, mxy - mx * my);
        acc.l += one.l;
        acc.c += one.c;
        acc.s += one.s;
        acc.ssim += one.ssim;
        ++count;
      }
  acc.l /= count;
  acc.c /= count;
  acc.s /= count;
  acc.ssim /= count;
  return acc;
}

inline std::vector<double> widen(std::span<const float> v) {
  return {v.begin(), v.end()};
}

}  // namespace testutil
