#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "harmon/rng.hpp"
#include "harmon/tensor.hpp"

namespace testutil {

inline harmon::Tensor rand_tensor(harmon::Shape shape, harmon::Rng& rng,
                                  float lo, float hi,
                                  bool requires_grad = true) {
  std::vector<float> data(static_cast<size_t>(harmon::shape_numel(shape)));
  for (float& v : data) v = rng.uniform(lo, hi);
  return harmon::Tensor::from_data(std::move(shape), std::move(data),
                                   requires_grad);
}

// Central finite differences against the recorded gradient, one scalar root
// built by `make_root` from shared leaves. Returns the max relative error
// over all coordinates of all leaves; denominators are floored so near-zero
// entries compare absolutely.
inline double fd_max_rel_err(
    std::vector<harmon::Tensor> leaves,
    const std::function<harmon::Tensor(harmon::Tape&)>& make_root,
    float eps = 1e-3f, float denom_floor = 1e-2f) {
  harmon::Tape tape;
  harmon::Tensor root = make_root(tape);
  tape.backward(root);
  std::vector<std::vector<float>> analytic;
  for (auto& leaf : leaves) {
    auto g = leaf.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) {
      analytic.back().assign(static_cast<size_t>(leaf.numel()), 0.0f);
    }
  }

  auto eval = [&]() {
    harmon::Tape t;
    t.set_recording(false);
    return static_cast<double>(make_root(t).scalar());
  };

  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].mutable_value();
    for (size_t i = 0; i < vals.size(); ++i) {
      float keep = vals[i];
      vals[i] = keep + eps;
      double fp = eval();
      vals[i] = keep - eps;
      double fm = eval();
      vals[i] = keep;
      double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
      double a = static_cast<double>(analytic[li][i]);
      double denom = std::max({std::fabs(a), std::fabs(fd),
                               static_cast<double>(denom_floor)});
      worst = std::max(worst, std::fabs(a - fd) / denom);
    }
  }
  return worst;
}

// Direct triple-loop cross-correlation, the independent reference for the
// GEMM-backed conv3d path.
inline std::vector<float> conv3d_naive(
    const std::vector<float>& x, const harmon::Shape& xs,
    const std::vector<float>& w, const harmon::Shape& ws,
    const std::vector<float>& bias, int stride, int pad) {
  int64_t N = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
  int64_t F = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
  int64_t Do = (D + 2 * pad - kd) / stride + 1;
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<float> out(static_cast<size_t>(N * F * Do * Ho * Wo), 0.0f);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t f = 0; f < F; ++f)
      for (int64_t od = 0; od < Do; ++od)
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow) {
            double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(f)];
            for (int64_t c = 0; c < C; ++c)
              for (int64_t dz = 0; dz < kd; ++dz)
                for (int64_t dy = 0; dy < kh; ++dy)
                  for (int64_t dx = 0; dx < kw; ++dx) {
                    int64_t iz = od * stride - pad + dz;
                    int64_t iy = oh * stride - pad + dy;
                    int64_t ix = ow * stride - pad + dx;
                    if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 ||
                        ix >= W) {
                      continue;
                    }
                    double xv = x[static_cast<size_t>(
                        ((n * C + c) * D + iz) * H * W + iy * W + ix)];
                    double wv = w[static_cast<size_t>(
                        (((f * C + c) * kd + dz) * kh + dy) * kw + dx)];
                    acc += xv * wv;
                  }
            out[static_cast<size_t>(
                (((n * F + f) * Do + od) * Ho + oh) * Wo + ow)] =
                static_cast<float>(acc);
          }
  return out;
}

}  // namespace testutil
