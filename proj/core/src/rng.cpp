#include "harmon/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "harmon/errors.hpp"

namespace harmon {

// Stateless draws only: every value is a pure function of engine output, so
// save_state/load_state round-trips reproduce the stream exactly.

float Rng::uniform() {
  // 53 random bits -> [0,1) double, then narrowed. Narrowing keeps the
  // distribution uniform at float32 resolution and never yields 1.0f.
  double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  float f = static_cast<float>(u);
  if (f >= 1.0f) f = std::nextafter(1.0f, 0.0f);
  return f;
}

float Rng::uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

float Rng::normal() {
  // Box-Muller, cosine branch only. Discarding the sine branch costs one
  // extra engine draw per value but keeps the stream stateless.
  double u1 = 0.0;
  do {
    u1 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  } while (u1 <= 0.0);
  double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  double r = std::sqrt(-2.0 * std::log(u1));
  return static_cast<float>(r * std::cos(2.0 * std::numbers::pi * u2));
}

float Rng::normal(float mean, float stddev) { return mean + stddev * normal(); }

int64_t Rng::index(int64_t n) {
  if (n <= 0) throw ConfigError("Rng::index: n must be positive");
  // Rejection sampling over the top multiple of n avoids modulo bias and
  // stays identical across standard libraries.
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t draw = 0;
  do {
    draw = engine_();
  } while (draw >= limit);
  return static_cast<int64_t>(draw % un);
}

std::vector<int64_t> Rng::permutation(int64_t n) {
  std::vector<int64_t> p(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    int64_t j = index(i + 1);
    std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
  }
  return p;
}

std::string Rng::save_state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::load_state(const std::string& text) {
  std::istringstream in(text);
  in >> engine_;
  if (in.fail()) throw FormatError("Rng::load_state: malformed engine state");
}

}  // namespace harmon
