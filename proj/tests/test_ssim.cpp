#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "harmon/errors.hpp"
#include "harmon/rng.hpp"
#include "harmon/ssim.hpp"
#include "harmon/tensor.hpp"
#include "helpers.hpp"
#include "ref_ssim.hpp"

using harmon::Rng;
using harmon::Shape;
using harmon::SsimComponents;
using harmon::SsimMode;
using harmon::SsimParams;
using harmon::Tape;
using harmon::Tensor;
using testutil::rand_tensor;

using testutil::ssim_reference;
using testutil::SsimRef;
using testutil::widen;

namespace {

Tensor volume_tensor(Rng& rng, int64_t n, float lo, float hi,
                     bool requires_grad = false) {
  return rand_tensor({1, 1, n, n, n}, rng, lo, hi, requires_grad);
}

}  // namespace

TEST_SUITE("ssim") {

TEST_CASE("gaussian window basics") {
  auto w0 = harmon::gaussian_window(0, 1.5f);
  REQUIRE(w0.size() == 1);
  CHECK(w0[0] == 1.0f);

  auto w3 = harmon::gaussian_window(3, 1.5f);
  REQUIRE(w3.size() == 7);
  double sum = 0.0;
  for (float v : w3) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(w3[0] == w3[6]);

  // center = 1 / (1 + 2 e^{-1/4.5})
  auto w1 = harmon::gaussian_window(1, 1.5f);
  CHECK(w1[1] == doctest::Approx(1.0 / (1.0 + 2.0 * std::exp(-1.0 / 4.5)))
                     .epsilon(1e-5));
}

TEST_CASE("identical inputs give unit components in both modes") {
  Rng rng(61);
  for (auto mode : {SsimMode::kWindowed, SsimMode::kGlobal}) {
    SsimParams p;
    p.mode = mode;
    Tensor x = volume_tensor(rng, 8, 0.05f, 0.95f);
    Tape t;
    SsimComponents c = ssim_components(t, x, x, p);
    CHECK(c.l.scalar() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(c.c.scalar() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(c.s.scalar() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(c.ssim.scalar() == doctest::Approx(1.0).epsilon(1e-6));
    Tensor loss = ssim_loss(t, x, x, p);
    CHECK(std::fabs(loss.scalar()) < 1e-6);
  }
}

TEST_CASE("constant volumes reproduce the closed-form luminance") {
  for (auto mode : {SsimMode::kWindowed, SsimMode::kGlobal}) {
    SsimParams p;
    p.mode = mode;
    Tensor x = Tensor::full({1, 1, 8, 8, 8}, 0.5f);
    Tensor y = Tensor::full({1, 1, 8, 8, 8}, 0.25f);
    Tape t;
    SsimComponents c = ssim_components(t, x, y, p);
    // (2*0.5*0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4) = 0.2501/0.3126
    CHECK(c.l.scalar() == doctest::Approx(0.2501 / 0.3126).epsilon(1e-3));
    CHECK(c.c.scalar() == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(c.s.scalar() == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("anti-correlated inputs drive structure to -1") {
  SsimParams p;
  p.mode = SsimMode::kGlobal;
  // Alternating 0.1/0.9 has variance 0.16 >> C3, so s nears its lower bound.
  std::vector<float> xv(512);
  for (size_t i = 0; i < xv.size(); ++i) xv[i] = (i % 2 == 0) ? 0.1f : 0.9f;
  std::vector<float> yv(512);
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = 1.0f - xv[i];
  Tensor x = Tensor::from_data({1, 1, 8, 8, 8}, xv);
  Tensor y = Tensor::from_data({1, 1, 8, 8, 8}, yv);
  Tape t;
  SsimComponents c = ssim_components(t, x, y, p);
  CHECK(c.s.scalar() == doctest::Approx(-1.0).epsilon(0.01));
}

TEST_CASE("components are symmetric in the arguments") {
  Rng rng(67);
  for (auto mode : {SsimMode::kWindowed, SsimMode::kGlobal}) {
    SsimParams p;
    p.mode = mode;
    Tensor x = volume_tensor(rng, 9, 0.0f, 1.0f);
    Tensor y = volume_tensor(rng, 9, 0.0f, 1.0f);
    Tape t;
    SsimComponents a = ssim_components(t, x, y, p);
    SsimComponents b = ssim_components(t, y, x, p);
    CHECK(a.l.scalar() == doctest::Approx(b.l.scalar()).epsilon(1e-6));
    CHECK(a.c.scalar() == doctest::Approx(b.c.scalar()).epsilon(1e-6));
    CHECK(a.s.scalar() == doctest::Approx(b.s.scalar()).epsilon(1e-6));
    CHECK(a.ssim.scalar() == doctest::Approx(b.ssim.scalar()).epsilon(1e-6));
  }
}

TEST_CASE("maps and aggregates stay inside their bounds") {
  Rng rng(71);
  SsimParams p;
  for (int rep = 0; rep < 3; ++rep) {
    Tensor x = volume_tensor(rng, 9, 0.0f, 1.0f);
    Tensor y = volume_tensor(rng, 9, 0.0f, 1.0f);
    Tape t;
    SsimComponents c = ssim_components(t, x, y, p);
    for (float v : c.l_map.value()) {
      CHECK(v > 0.0f);
      CHECK(v <= 1.0f + 1e-6f);
    }
    for (float v : c.c_map.value()) {
      CHECK(v > 0.0f);
      CHECK(v <= 1.0f + 1e-6f);
    }
    for (float v : c.s_map.value()) {
      CHECK(v >= -1.0f - 1e-6f);
      CHECK(v <= 1.0f + 1e-6f);
    }
    CHECK(c.ssim.scalar() >= -1.0f - 1e-6f);
    CHECK(c.ssim.scalar() <= 1.0f + 1e-6f);
    Tensor loss = ssim_loss(t, x, y, p);
    CHECK(loss.scalar() >= 0.0f);
    CHECK(loss.scalar() <= 2.0f);
  }
}

TEST_CASE("ssim equals the mean product of the three maps") {
  Rng rng(73);
  Tensor x = volume_tensor(rng, 9, 0.0f, 1.0f);
  Tensor y = volume_tensor(rng, 9, 0.0f, 1.0f);
  Tape t;
  SsimComponents c = ssim_components(t, x, y, SsimParams{});
  Tensor prod = t.mean(t.mul(t.mul(c.l_map, c.c_map), c.s_map));
  CHECK(c.ssim.scalar() == doctest::Approx(prod.scalar()).epsilon(1e-6));
}

TEST_CASE("uniform full-volume window reduces to global statistics") {
  Rng rng(79);
  Tensor x = volume_tensor(rng, 7, 0.0f, 1.0f);
  Tensor y = volume_tensor(rng, 7, 0.0f, 1.0f);
  SsimParams wp;
  wp.window_radius = 3;      // diameter 7 covers the whole volume
  wp.window_sigma = 1e9f;    // effectively uniform taps
  SsimParams gp;
  gp.mode = SsimMode::kGlobal;
  Tape t;
  SsimComponents a = ssim_components(t, x, y, wp);
  SsimComponents b = ssim_components(t, x, y, gp);
  CHECK(a.l.scalar() == doctest::Approx(b.l.scalar()).epsilon(1e-6));
  CHECK(a.c.scalar() == doctest::Approx(b.c.scalar()).epsilon(1e-6));
  CHECK(a.s.scalar() == doctest::Approx(b.s.scalar()).epsilon(1e-6));
  CHECK(a.ssim.scalar() == doctest::Approx(b.ssim.scalar()).epsilon(1e-6));
}

TEST_CASE("windowed components match the double-precision oracle") {
  Rng rng(83);
  const int64_t n = 10;
  Tensor x = volume_tensor(rng, n, 0.0f, 1.0f);
  Tensor y = volume_tensor(rng, n, 0.0f, 1.0f);
  for (auto mode : {SsimMode::kWindowed, SsimMode::kGlobal}) {
    SsimParams p;
    p.mode = mode;
    Tape t;
    SsimComponents c = ssim_components(t, x, y, p);
    SsimRef ref = ssim_reference(widen(x.value()), widen(y.value()), n, n, n, p);
    CHECK(c.l.scalar() == doctest::Approx(ref.l).epsilon(1e-5));
    CHECK(c.c.scalar() == doctest::Approx(ref.c).epsilon(1e-5));
    CHECK(c.s.scalar() == doctest::Approx(ref.s).epsilon(1e-5));
    CHECK(c.ssim.scalar() == doctest::Approx(ref.ssim).epsilon(1e-5));
  }
}

TEST_CASE("similarity decreases monotonically with added noise") {
  // Smooth structured base: product of sinusoids, scaled into [0.1, 0.9].
  const int64_t n = 16;
  std::vector<float> base(static_cast<size_t>(n * n * n));
  for (int64_t z = 0; z < n; ++z)
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        double v = std::sin(0.5 * z) * std::cos(0.4 * y) * std::sin(0.3 * x + 0.7);
        base[static_cast<size_t>((z * n + y) * n + x)] =
            static_cast<float>(0.5 + 0.4 * v);
      }
  Tensor xb = Tensor::from_data({1, 1, n, n, n}, base);
  SsimParams p;
  double prev = 2.0;
  Rng noise_rng(89);
  for (float sigma : {0.01f, 0.05f, 0.1f}) {
    std::vector<float> noisy(base);
    for (float& v : noisy) v += noise_rng.normal(0.0f, sigma);
    Tensor yb = Tensor::from_data({1, 1, n, n, n}, noisy);
    Tape t;
    double s = ssim_components(t, xb, yb, p).ssim.scalar();
    CHECK(s < prev);
    prev = s;
  }
}

TEST_CASE("loss is stationary at equality") {
  Rng rng(97);
  Tensor x = volume_tensor(rng, 8, 0.1f, 0.9f, true);
  Tensor y = Tensor::from_data(x.shape(),
                               {x.value().begin(), x.value().end()});
  Tape t;
  Tensor loss = ssim_loss(t, x, y, SsimParams{});
  t.backward(loss);
  for (float g : x.grad()) CHECK(std::fabs(g) < 1e-4f);
}

TEST_CASE("loss gradient matches finite differences") {
  // Central differences run against the double-precision reference forward,
  // so the quotient noise floor sits far below the 1e-4 bar; the remaining
  // discrepancy is float32 rounding inside the analytic gradient itself.
  Rng rng(101);
  const int64_t n = 8;
  for (auto mode : {SsimMode::kWindowed, SsimMode::kGlobal}) {
    SsimParams p;
    p.mode = mode;
    Tensor x = rand_tensor({1, 1, n, n, n}, rng, 0.1f, 0.9f, true);
    Tensor y = rand_tensor({1, 1, n, n, n}, rng, 0.1f, 0.9f, true);
    Tape t;
    Tensor loss = ssim_loss(t, x, y, p);
    t.backward(loss);

    std::vector<double> xd = widen(x.value());
    std::vector<double> yd = widen(y.value());
    const double eps = 1e-4;
    auto check_arg = [&](std::vector<double>& arg,
                         std::span<const float> analytic) {
      double ginf = 0.0;
      for (float g : analytic) ginf = std::max(ginf, std::fabs(double(g)));
      double worst = 0.0;
      for (size_t i = 0; i < arg.size(); ++i) {
        double keep = arg[i];
        arg[i] = keep + eps;
        double fp = 1.0 - ssim_reference(xd, yd, n, n, n, p).ssim;
        arg[i] = keep - eps;
        double fm = 1.0 - ssim_reference(xd, yd, n, n, n, p).ssim;
        arg[i] = keep;
        double fd = (fp - fm) / (2 * eps);
        // Relative to the gradient scale, so near-cancelling coordinates
        // do not inflate the metric beyond float32 resolution.
        worst = std::max(worst, std::fabs(analytic[i] - fd) / ginf);
      }
      CHECK(worst < 1e-4);
    };
    check_arg(xd, x.grad());
    check_arg(yd, y.grad());
  }
}

TEST_CASE("luminance and structure terms behave as expected") {
  Rng rng(103);
  Tensor x = volume_tensor(rng, 16, 0.2f, 0.7f);
  SsimParams p;
  Tape t;
  CHECK(structure_term(t, x, x, p).scalar() ==
        doctest::Approx(1.0).epsilon(1e-6));

  // Mean shift strictly lowers luminance.
  Tensor shifted = t.add(x, 0.1f);
  CHECK(luminance_term(t, x, shifted, p).scalar() < 1.0f);

  // Positive affine maps preserve structure almost exactly.
  Tensor affine = t.add(t.mul(x, 2.0f), 0.1f);
  CHECK(structure_term(t, x, affine, p).scalar() >= 0.999f);
}

TEST_CASE("shape and window preconditions are enforced") {
  Tape t;
  Tensor a = Tensor::full({1, 1, 8, 8, 8}, 0.5f);
  Tensor b = Tensor::full({1, 1, 8, 8, 9}, 0.5f);
  CHECK_THROWS_AS((void)ssim_components(t, a, b, SsimParams{}),
                  harmon::ShapeError);
  Tensor small = Tensor::full({1, 1, 4, 4, 4}, 0.5f);
  CHECK_THROWS_AS((void)ssim_components(t, small, small, SsimParams{}),
                  harmon::ShapeError);
  SsimParams bad;
  bad.k1 = 0.0f;
  CHECK_THROWS_AS((void)ssim_components(t, a, a, bad), harmon::ConfigError);
}

}  // TEST_SUITE
