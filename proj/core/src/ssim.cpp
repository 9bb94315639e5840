#include "harmon/ssim.hpp"

#include <cmath>

#include "harmon/errors.hpp"

namespace harmon {

namespace {

// Variance estimates can dip a hair below zero in float32; the clamp keeps
// sqrt defined and the epsilon keeps it differentiable on constant windows.
constexpr float kVarEps = 1e-12f;
constexpr float kVarCeil = 3.0e38f;

Tensor as_volume5(Tape& tape, const Tensor& t, const char* who) {
  if (t.rank() == 5) {
    if (t.dim(0) != 1 || t.dim(1) != 1) {
      throw ShapeError(std::string(who) + ": expected [1,1,D,H,W], got " +
                       shape_to_string(t.shape()));
    }
    return t;
  }
  if (t.rank() == 3) {
    return tape.reshape(t, {1, 1, t.dim(0), t.dim(1), t.dim(2)});
  }
  throw ShapeError(std::string(who) + ": expected rank 3 or 5, got " +
                   shape_to_string(t.shape()));
}

// Gaussian-weighted local mean via three separable valid convolutions.
Tensor window_mean(Tape& tape, const Tensor& x, const std::vector<float>& w) {
  auto k = static_cast<int64_t>(w.size());
  Tensor kz = Tensor::from_data({1, 1, k, 1, 1}, w);
  Tensor ky = Tensor::from_data({1, 1, 1, k, 1}, w);
  Tensor kx = Tensor::from_data({1, 1, 1, 1, k}, w);
  Tensor out = tape.conv3d(x, kz, Tensor(), 1, 0);
  out = tape.conv3d(out, ky, Tensor(), 1, 0);
  out = tape.conv3d(out, kx, Tensor(), 1, 0);
  return out;
}

struct Moments {
  Tensor mu_x, mu_y, var_x, var_y, cov;
};

Moments local_moments(Tape& tape, const Tensor& x, const Tensor& y,
                      const SsimParams& p) {
  Moments m;
  if (p.mode == SsimMode::kGlobal) {
    m.mu_x = tape.mean(x);
    m.mu_y = tape.mean(y);
    m.var_x = tape.sub(tape.mean(tape.mul(x, x)), tape.mul(m.mu_x, m.mu_x));
    m.var_y = tape.sub(tape.mean(tape.mul(y, y)), tape.mul(m.mu_y, m.mu_y));
    m.cov = tape.sub(tape.mean(tape.mul(x, y)), tape.mul(m.mu_x, m.mu_y));
    return m;
  }
  int64_t diameter = 2 * static_cast<int64_t>(p.window_radius) + 1;
  for (size_t axis = 2; axis < 5; ++axis) {
    if (x.dim(axis) < diameter) {
      throw ShapeError("ssim: extent " + std::to_string(x.dim(axis)) +
                       " smaller than window diameter " +
                       std::to_string(diameter));
    }
  }
  auto w = gaussian_window(p.window_radius, p.window_sigma);
  m.mu_x = window_mean(tape, x, w);
  m.mu_y = window_mean(tape, y, w);
  m.var_x = tape.sub(window_mean(tape, tape.mul(x, x), w),
                     tape.mul(m.mu_x, m.mu_x));
  m.var_y = tape.sub(window_mean(tape, tape.mul(y, y), w),
                     tape.mul(m.mu_y, m.mu_y));
  m.cov = tape.sub(window_mean(tape, tape.mul(x, y), w),
                   tape.mul(m.mu_x, m.mu_y));
  return m;
}

Tensor pow_unless_one(Tape& tape, const Tensor& t, float e) {
  return e == 1.0f ? t : tape.pow(t, e);
}

}  // namespace

void SsimParams::validate() const {
  if (window_radius < 0) throw ConfigError("ssim: window_radius must be >= 0");
  if (!(window_sigma > 0.0f)) throw ConfigError("ssim: window_sigma must be > 0");
  if (!(k1 > 0.0f) || !(k2 > 0.0f)) throw ConfigError("ssim: k1, k2 must be > 0");
  if (!(dynamic_range > 0.0f)) throw ConfigError("ssim: dynamic range must be > 0");
  if (!(alpha >= 0.0f) || !(beta >= 0.0f) || !(gamma >= 0.0f) ||
      !std::isfinite(alpha) || !std::isfinite(beta) || !std::isfinite(gamma)) {
    throw ConfigError("ssim: exponents must be finite and nonnegative");
  }
}

std::vector<float> gaussian_window(int radius, float sigma) {
  if (radius < 0) throw ConfigError("gaussian_window: radius must be >= 0");
  if (!(sigma > 0.0f)) throw ConfigError("gaussian_window: sigma must be > 0");
  std::vector<double> w(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-static_cast<double>(i) * i /
                        (2.0 * static_cast<double>(sigma) * sigma));
    w[static_cast<size_t>(i + radius)] = v;
    total += v;
  }
  std::vector<float> out(w.size());
  for (size_t i = 0; i < w.size(); ++i) {
    out[i] = static_cast<float>(w[i] / total);
  }
  return out;
}

SsimComponents ssim_components(Tape& tape, const Tensor& x, const Tensor& y,
                               const SsimParams& params) {
  params.validate();
  Tensor xv = as_volume5(tape, x, "ssim");
  Tensor yv = as_volume5(tape, y, "ssim");
  if (xv.shape() != yv.shape()) {
    throw ShapeError("ssim: shape mismatch " + shape_to_string(xv.shape()) +
                     " vs " + shape_to_string(yv.shape()));
  }

  Moments m = local_moments(tape, xv, yv, params);
  float C1 = params.c1(), C2 = params.c2(), C3 = params.c3();

  Tensor sigma_x =
      tape.sqrt(tape.add(tape.clamp(m.var_x, 0.0f, kVarCeil), kVarEps));
  Tensor sigma_y =
      tape.sqrt(tape.add(tape.clamp(m.var_y, 0.0f, kVarCeil), kVarEps));
  Tensor sxsy = tape.mul(sigma_x, sigma_y);

  SsimComponents out;
  out.l_map = tape.div(
      tape.add(tape.mul(tape.mul(m.mu_x, m.mu_y), 2.0f), C1),
      tape.add(tape.add(tape.mul(m.mu_x, m.mu_x), tape.mul(m.mu_y, m.mu_y)),
               C1));
  out.c_map = tape.div(
      tape.add(tape.mul(sxsy, 2.0f), C2),
      tape.add(tape.add(tape.clamp(m.var_x, 0.0f, kVarCeil),
                        tape.clamp(m.var_y, 0.0f, kVarCeil)),
               C2));
  out.s_map = tape.div(tape.add(m.cov, C3), tape.add(sxsy, C3));

  out.l = tape.mean(out.l_map);
  out.c = tape.mean(out.c_map);
  out.s = tape.mean(out.s_map);
  Tensor prod = tape.mul(
      tape.mul(pow_unless_one(tape, out.l_map, params.alpha),
               pow_unless_one(tape, out.c_map, params.beta)),
      pow_unless_one(tape, out.s_map, params.gamma));
  out.ssim = tape.mean(prod);
  return out;
}

Tensor ssim_loss(Tape& tape, const Tensor& x, const Tensor& y,
                 const SsimParams& params) {
  SsimComponents c = ssim_components(tape, x, y, params);
  return tape.sub(1.0f, c.ssim);
}

Tensor structure_term(Tape& tape, const Tensor& x, const Tensor& y,
                      const SsimParams& params) {
  return ssim_components(tape, x, y, params).s;
}

Tensor luminance_term(Tape& tape, const Tensor& x, const Tensor& y,
                      const SsimParams& params) {
  return ssim_components(tape, x, y, params).l;
}

}  // namespace harmon
