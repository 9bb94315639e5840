#include "harmon/optimizer.hpp"

#include <cmath>
#include <cstddef>

#include "harmon/errors.hpp"

namespace harmon {

void AdamConfig::validate() const {
  if (!(lr >= 0.0f) || !std::isfinite(lr)) {
    throw ConfigError("adam: learning rate must be finite and >= 0");
  }
  if (!(beta1 >= 0.0f && beta1 < 1.0f)) {
    throw ConfigError("adam: beta1 must lie in [0,1)");
  }
  if (!(beta2 >= 0.0f && beta2 < 1.0f)) {
    throw ConfigError("adam: beta2 must lie in [0,1)");
  }
  if (!(eps > 0.0f)) {
    throw ConfigError("adam: eps must be > 0");
  }
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  state_.m.resize(params_.size());
  state_.v.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<std::size_t>(params_[i].second.numel());
    state_.m[i].assign(n, 0.0f);
    state_.v[i].assign(n, 0.0f);
  }
}

void Adam::step() {
  ++state_.step;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    auto value = p.mutable_value();
    auto grad = p.grad();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double step_size =
          config_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + config_.eps);
      value[j] = static_cast<float>(value[j] - step_size);
    }
    p.zero_grad();
  }
}

void Adam::restore(AdamState state) {
  if (state.m.size() != params_.size() || state.v.size() != params_.size()) {
    throw FormatError("adam restore: moment buffer count mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<std::size_t>(params_[i].second.numel());
    if (state.m[i].size() != n || state.v[i].size() != n) {
      throw FormatError("adam restore: moment buffer size mismatch for " +
                        params_[i].first);
    }
  }
  if (state.step < 0) {
    throw FormatError("adam restore: negative step counter");
  }
  state_ = std::move(state);
}

}  // namespace harmon
