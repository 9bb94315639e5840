#include "harmon/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "harmon/errors.hpp"

namespace harmon {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// Lazily allocates the adjoint buffer, zero-filled.
std::span<float> grad_of(const NodePtr& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0f);
  return {n->grad.data(), n->grad.size()};
}

void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_to_string(a) + " vs " + shape_to_string(b));
  }
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

int64_t checked_dim(const Shape& s, size_t axis) {
  return s.at(axis);
}

void check_nonzero(std::span<const float> v, const char* op) {
  for (float x : v) {
    if (x == 0.0f) throw NumericError(std::string(op) + ": zero denominator");
  }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("shape has non-positive dimension");
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& s) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out << ",";
    out << s[i];
  }
  out << "]";
  return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  int64_t n = shape_numel(shape);
  node->shape = std::move(shape);
  node->value.assign(static_cast<size_t>(n), 0.0f);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, float fill, bool requires_grad) {
  if (!std::isfinite(fill)) throw NumericError("Tensor::full: non-finite fill");
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data,
                         bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (static_cast<size_t>(n) != data.size()) {
    throw ShapeError("Tensor::from_data: " + shape_to_string(shape) +
                     " needs " + std::to_string(n) + " values, got " +
                     std::to_string(data.size()));
  }
  for (float v : data) {
    if (!std::isfinite(v)) {
      throw NumericError("Tensor::from_data: non-finite input value");
    }
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar_tensor(float v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("Tensor::shape on undefined tensor");
  return node_->shape;
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(node_ ? node_->value.size() : 0);
}

int64_t Tensor::dim(size_t axis) const { return checked_dim(shape(), axis); }

size_t Tensor::rank() const { return shape().size(); }

std::span<const float> Tensor::value() const {
  if (!node_) throw ShapeError("Tensor::value on undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

std::span<float> Tensor::mutable_value() {
  if (!node_) throw ShapeError("Tensor::mutable_value on undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

float Tensor::scalar() const {
  if (numel() != 1) {
    throw ShapeError("Tensor::scalar on tensor of shape " +
                     shape_to_string(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const float> Tensor::grad() const {
  if (!node_) throw ShapeError("Tensor::grad on undefined tensor");
  return {node_->grad.data(), node_->grad.size()};
}

std::span<float> Tensor::mutable_grad() {
  if (!node_) throw ShapeError("Tensor::mutable_grad on undefined tensor");
  return grad_of(node_);
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }
}

// ---------------------------------------------------------------------------
// Tape plumbing

Tensor Tape::make_output(Shape shape, bool track) {
  Tensor t = Tensor::zeros(std::move(shape), false);
  t.node_->requires_grad = track;
  return t;
}

bool Tape::track(const Tensor& a) const {
  return recording_ && a.defined() && a.node_->requires_grad;
}

void Tape::backward(const Tensor& root) {
  check_defined(root, "backward");
  if (root.numel() != 1) {
    throw ShapeError("Tape::backward: root must be scalar, got " +
                     shape_to_string(root.shape()));
  }
  grad_of(root.node_)[0] += 1.0f;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// Elementwise binary

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a.shape(), b.shape(), "add");
  bool tr = track(a) || track(b);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tr) {
    NodePtr an = a.node_, bn = b.node_, on = out.node_;
    record([an, bn, on] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto g = grad_of(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto g = grad_of(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a.shape(), b.shape(), "sub");
  bool tr = track(a) || track(b);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (tr) {
    NodePtr an = a.node_, bn = b.node_, on = out.node_;
    record([an, bn, on] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto g = grad_of(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto g = grad_of(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a.shape(), b.shape(), "mul");
  bool tr = track(a) || track(b);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (tr) {
    NodePtr an = a.node_, bn = b.node_, on = out.node_;
    record([an, bn, on] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto g = grad_of(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto g = grad_of(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor Tape::div(const Tensor& a, const Tensor& b) {
  check_defined(a, "div");
  check_defined(b, "div");
  check_same_shape(a.shape(), b.shape(), "div");
  check_nonzero(b.value(), "div");
  bool tr = track(a) || track(b);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  if (tr) {
    NodePtr an = a.node_, bn = b.node_, on = out.node_;
    record([an, bn, on] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto g = grad_of(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] / bn->value[i];
      }
      if (bn->requires_grad) {
        auto g = grad_of(bn);
        for (size_t i = 0; i < g.size(); ++i) {
          g[i] -= on->grad[i] * on->value[i] / bn->value[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise with scalar

Tensor Tape::add(const Tensor& a, float b) {
  check_defined(a, "add");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + b;
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, float b) { return add(a, -b); }

Tensor Tape::sub(float a, const Tensor& b) {
  check_defined(b, "sub");
  bool tr = track(b);
  Tensor out = make_output(b.shape(), tr);
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = a - bv[i];
  if (tr) {
    NodePtr bn = b.node_, on = out.node_;
    record([bn, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(bn);
      for (size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, float b) {
  check_defined(a, "mul");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * b;
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on, b] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * b;
    });
  }
  return out;
}

Tensor Tape::div(const Tensor& a, float b) {
  if (b == 0.0f) throw NumericError("div: zero denominator");
  return mul(a, 1.0f / b);
}

Tensor Tape::div(float a, const Tensor& b) {
  check_defined(b, "div");
  check_nonzero(b.value(), "div");
  bool tr = track(b);
  Tensor out = make_output(b.shape(), tr);
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = a / bv[i];
  if (tr) {
    NodePtr bn = b.node_, on = out.node_;
    record([bn, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(bn);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] -= on->grad[i] * on->value[i] / bn->value[i];
      }
    });
  }
  return out;
}

Tensor Tape::neg(const Tensor& a) { return mul(a, -1.0f); }

// ---------------------------------------------------------------------------
// Elementwise unary

Tensor Tape::pow(const Tensor& a, float exponent) {
  check_defined(a, "pow");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::pow(av[i], exponent);
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on, exponent] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] += on->grad[i] * exponent * std::pow(an->value[i], exponent - 1.0f);
      }
    });
  }
  return out;
}

Tensor Tape::sqrt(const Tensor& a) {
  check_defined(a, "sqrt");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(av[i]);
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] += on->grad[i] * 0.5f / on->value[i];
      }
    });
  }
  return out;
}

Tensor Tape::abs(const Tensor& a) {
  check_defined(a, "abs");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::fabs(av[i]);
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        float x = an->value[i];
        g[i] += on->grad[i] * (x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f));
      }
    });
  }
  return out;
}

Tensor Tape::tanh(const Tensor& a) {
  check_defined(a, "tanh");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(av[i]);
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        float y = on->value[i];
        g[i] += on->grad[i] * (1.0f - y * y);
      }
    });
  }
  return out;
}

Tensor Tape::sigmoid(const Tensor& a) {
  check_defined(a, "sigmoid");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) {
    ov[i] = 1.0f / (1.0f + std::exp(-av[i]));
  }
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        float y = on->value[i];
        g[i] += on->grad[i] * y * (1.0f - y);
      }
    });
  }
  return out;
}

Tensor Tape::leaky_relu(const Tensor& a, float negative_slope) {
  check_defined(a, "leaky_relu");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) {
    ov[i] = av[i] > 0.0f ? av[i] : negative_slope * av[i];
  }
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on, negative_slope] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] += on->grad[i] * (an->value[i] > 0.0f ? 1.0f : negative_slope);
      }
    });
  }
  return out;
}

Tensor Tape::clamp(const Tensor& a, float lo, float hi) {
  check_defined(a, "clamp");
  if (!(lo < hi)) throw ConfigError("clamp: lo must be < hi");
  bool tr = track(a);
  Tensor out = make_output(a.shape(), tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < ov.size(); ++i) {
    ov[i] = std::min(std::max(av[i], lo), hi);
  }
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on, lo, hi] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        float x = an->value[i];
        if (x > lo && x < hi) g[i] += on->grad[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Tape::sum(const Tensor& a) {
  check_defined(a, "sum");
  bool tr = track(a);
  Tensor out = make_output({1}, tr);
  auto av = a.value();
  double acc = 0.0;
  for (float v : av) acc += static_cast<double>(v);
  out.mutable_value()[0] = static_cast<float>(acc);
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      float g0 = on->grad[0];
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += g0;
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& a) {
  check_defined(a, "mean");
  bool tr = track(a);
  Tensor out = make_output({1}, tr);
  auto av = a.value();
  double acc = 0.0;
  for (float v : av) acc += static_cast<double>(v);
  float inv_n = 1.0f / static_cast<float>(av.size());
  out.mutable_value()[0] = static_cast<float>(acc / av.size());
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on, inv_n] {
      if (on->grad.empty()) return;
      float g0 = on->grad[0] * inv_n;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += g0;
    });
  }
  return out;
}

namespace {

// Maps each input element to its output slot when `axes` are reduced away.
std::vector<int64_t> reduce_index_map(const Shape& in_shape,
                                      const std::vector<size_t>& axes,
                                      Shape* out_shape, int64_t* reduced) {
  std::vector<bool> is_reduced(in_shape.size(), false);
  for (size_t ax : axes) {
    if (ax >= in_shape.size()) throw ShapeError("reduce: axis out of range");
    if (is_reduced[ax]) throw ShapeError("reduce: duplicate axis");
    is_reduced[ax] = true;
  }
  out_shape->clear();
  *reduced = 1;
  for (size_t i = 0; i < in_shape.size(); ++i) {
    if (is_reduced[i]) {
      *reduced *= in_shape[i];
    } else {
      out_shape->push_back(in_shape[i]);
    }
  }
  if (out_shape->empty()) out_shape->push_back(1);

  int64_t n = shape_numel(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> idx(in_shape.size(), 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t out_flat = 0;
    for (size_t i = 0; i < in_shape.size(); ++i) {
      if (!is_reduced[i]) out_flat = out_flat * in_shape[i] + idx[i];
    }
    map[static_cast<size_t>(flat)] = out_flat;
    for (size_t i = in_shape.size(); i-- > 0;) {
      if (++idx[i] < in_shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor Tape::sum(const Tensor& a, const std::vector<size_t>& axes) {
  check_defined(a, "sum");
  if (axes.empty()) return sum(a);
  Shape out_shape;
  int64_t reduced = 0;
  auto map = reduce_index_map(a.shape(), axes, &out_shape, &reduced);
  bool tr = track(a);
  Tensor out = make_output(out_shape, tr);
  auto av = a.value();
  auto ov = out.mutable_value();
  for (size_t i = 0; i < av.size(); ++i) {
    ov[static_cast<size_t>(map[i])] += av[i];
  }
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    auto shared_map = std::make_shared<std::vector<int64_t>>(std::move(map));
    record([an, on, shared_map] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] += on->grad[static_cast<size_t>((*shared_map)[i])];
      }
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& a, const std::vector<size_t>& axes) {
  if (axes.empty()) return mean(a);
  Shape out_shape;
  int64_t reduced = 1;
  {
    // Validate axes and compute the divisor before delegating to sum().
    Shape tmp;
    reduce_index_map(a.shape(), axes, &tmp, &reduced);
  }
  Tensor s = sum(a, axes);
  return mul(s, 1.0f / static_cast<float>(reduced));
}

Tensor Tape::var(const Tensor& a, bool unbiased) {
  check_defined(a, "var");
  std::vector<size_t> axes(a.rank());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return var(a, axes, unbiased);
}

Tensor Tape::var(const Tensor& a, const std::vector<size_t>& axes,
                 bool unbiased) {
  check_defined(a, "var");
  if (axes.empty()) return var(a, unbiased);
  Shape out_shape;
  int64_t reduced = 0;
  auto map = reduce_index_map(a.shape(), axes, &out_shape, &reduced);
  if (unbiased && reduced < 2) {
    throw ShapeError("var: unbiased variance needs at least 2 elements");
  }
  float q = static_cast<float>(unbiased ? reduced - 1 : reduced);
  bool tr = track(a);
  Tensor out = make_output(out_shape, tr);
  auto av = a.value();
  int64_t groups = shape_numel(out_shape);
  std::vector<double> acc(static_cast<size_t>(groups), 0.0);
  std::vector<double> acc2(static_cast<size_t>(groups), 0.0);
  for (size_t i = 0; i < av.size(); ++i) {
    auto g = static_cast<size_t>(map[i]);
    acc[g] += av[i];
    acc2[g] += static_cast<double>(av[i]) * av[i];
  }
  auto mu = std::make_shared<std::vector<float>>(static_cast<size_t>(groups));
  auto ov = out.mutable_value();
  for (int64_t g = 0; g < groups; ++g) {
    double m = acc[static_cast<size_t>(g)] / static_cast<double>(reduced);
    double ss = acc2[static_cast<size_t>(g)] -
                static_cast<double>(reduced) * m * m;
    (*mu)[static_cast<size_t>(g)] = static_cast<float>(m);
    ov[static_cast<size_t>(g)] = static_cast<float>(std::max(0.0, ss) / q);
  }
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    auto shared_map = std::make_shared<std::vector<int64_t>>(std::move(map));
    float inv_q = 1.0f / q;
    // d var / d x_i = 2 (x_i - mu) / q; the mean term cancels.
    record([an, on, shared_map, mu, inv_q] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) {
        auto gi = static_cast<size_t>((*shared_map)[i]);
        g[i] += on->grad[gi] * 2.0f * inv_q * (an->value[i] - (*mu)[gi]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv3d: im2col + sgemm

// Weak so linking against a BLAS without this entry point still works.
extern "C" void openblas_set_num_threads(int) __attribute__((weak));

namespace {

// GEMM runs single-threaded: bit-reproducible and composable with
// caller-level parallelism (independent tapes on separate threads).
void pin_blas_threads() {
  static const bool done = [] {
    if (openblas_set_num_threads) openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

struct ConvDims {
  int64_t N, C, D, H, W;
  int64_t F, kd, kh, kw;
  int64_t stride, pad;
  int64_t Do, Ho, Wo;
  int64_t ck() const { return C * kd * kh * kw; }
  int64_t patches() const { return Do * Ho * Wo; }
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, int stride, int padding) {
  if (xs.size() != 5) throw ShapeError("conv3d: input must be rank 5 [N,C,D,H,W]");
  if (ws.size() != 5) throw ShapeError("conv3d: kernel must be rank 5 [F,C,kd,kh,kw]");
  if (stride < 1) throw ConfigError("conv3d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv3d: padding must be >= 0");
  ConvDims d;
  d.N = xs[0]; d.C = xs[1]; d.D = xs[2]; d.H = xs[3]; d.W = xs[4];
  d.F = ws[0]; d.kd = ws[2]; d.kh = ws[3]; d.kw = ws[4];
  if (ws[1] != d.C) {
    throw ShapeError("conv3d: kernel channels " + std::to_string(ws[1]) +
                     " do not match input channels " + std::to_string(d.C));
  }
  d.stride = stride;
  d.pad = padding;
  d.Do = (d.D + 2 * d.pad - d.kd) / d.stride + 1;
  d.Ho = (d.H + 2 * d.pad - d.kh) / d.stride + 1;
  d.Wo = (d.W + 2 * d.pad - d.kw) / d.stride + 1;
  if (d.D + 2 * d.pad < d.kd || d.H + 2 * d.pad < d.kh || d.W + 2 * d.pad < d.kw) {
    throw ShapeError("conv3d: kernel larger than padded input");
  }
  return d;
}

// im2col operands reach ~100 MB on large volumes; freshly allocated vectors
// of that size go straight back to the OS on free and the refaulting pages
// dominate step time, so the buffers persist across calls instead.
template <int Slot>
float* conv_scratch(int64_t n) {
  thread_local std::vector<float> buf;
  if (static_cast<int64_t>(buf.size()) < n) buf.resize(static_cast<size_t>(n));
  return buf.data();
}

// Row r = ((c*kd+dz)*kh+dy)*kw+dx holds x[c, od*s-p+dz, oh*s-p+dy, ow*s-p+dx]
// over all output voxels, zeros where the tap falls outside the volume.
void im2col_3d(const float* x, const ConvDims& d, float* col) {
  const int64_t plane = d.Ho * d.Wo;
  int64_t r = 0;
  for (int64_t c = 0; c < d.C; ++c) {
    const float* xc = x + c * d.D * d.H * d.W;
    for (int64_t dz = 0; dz < d.kd; ++dz)
      for (int64_t dy = 0; dy < d.kh; ++dy)
        for (int64_t dx = 0; dx < d.kw; ++dx, ++r) {
          float* dst = col + r * d.patches();
          for (int64_t od = 0; od < d.Do; ++od) {
            int64_t iz = od * d.stride - d.pad + dz;
            if (iz < 0 || iz >= d.D) {
              std::fill(dst, dst + plane, 0.0f);
              dst += plane;
              continue;
            }
            for (int64_t oh = 0; oh < d.Ho; ++oh) {
              int64_t iy = oh * d.stride - d.pad + dy;
              if (iy < 0 || iy >= d.H) {
                std::fill(dst, dst + d.Wo, 0.0f);
                dst += d.Wo;
                continue;
              }
              const float* row = xc + (iz * d.H + iy) * d.W;
              if (d.stride == 1) {
                int64_t ix0 = dx - d.pad;
                int64_t lo = std::max<int64_t>(0, -ix0);
                int64_t hi = std::min<int64_t>(d.Wo, d.W - ix0);
                if (hi < lo) hi = lo;
                std::fill(dst, dst + lo, 0.0f);
                if (hi > lo) {
                  std::memcpy(dst + lo, row + ix0 + lo,
                              static_cast<size_t>(hi - lo) * sizeof(float));
                }
                std::fill(dst + hi, dst + d.Wo, 0.0f);
                dst += d.Wo;
              } else {
                for (int64_t ow = 0; ow < d.Wo; ++ow) {
                  int64_t ix = ow * d.stride - d.pad + dx;
                  *dst++ = (ix >= 0 && ix < d.W) ? row[ix] : 0.0f;
                }
              }
            }
          }
        }
  }
}

// Adjoint of im2col_3d: scatter-adds col rows back into the input gradient.
void col2im_3d(const float* col, const ConvDims& d, float* gx) {
  int64_t r = 0;
  for (int64_t c = 0; c < d.C; ++c) {
    float* gc = gx + c * d.D * d.H * d.W;
    for (int64_t dz = 0; dz < d.kd; ++dz)
      for (int64_t dy = 0; dy < d.kh; ++dy)
        for (int64_t dx = 0; dx < d.kw; ++dx, ++r) {
          const float* src = col + r * d.patches();
          for (int64_t od = 0; od < d.Do; ++od) {
            int64_t iz = od * d.stride - d.pad + dz;
            if (iz < 0 || iz >= d.D) {
              src += d.Ho * d.Wo;
              continue;
            }
            for (int64_t oh = 0; oh < d.Ho; ++oh) {
              int64_t iy = oh * d.stride - d.pad + dy;
              if (iy < 0 || iy >= d.H) {
                src += d.Wo;
                continue;
              }
              float* row = gc + (iz * d.H + iy) * d.W;
              for (int64_t ow = 0; ow < d.Wo; ++ow) {
                int64_t ix = ow * d.stride - d.pad + dx;
                if (ix >= 0 && ix < d.W) row[ix] += src[ow];
              }
              src += d.Wo;
            }
          }
        }
  }
}

}  // namespace

Tensor Tape::conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
                    int stride, int padding) {
  check_defined(x, "conv3d");
  check_defined(w, "conv3d");
  pin_blas_threads();
  ConvDims d = conv_dims(x.shape(), w.shape(), stride, padding);
  if (bias.defined() && bias.shape() != Shape{d.F}) {
    throw ShapeError("conv3d: bias must be [F]");
  }
  bool tr = track(x) || track(w) || (bias.defined() && track(bias));
  Tensor out = make_output({d.N, d.F, d.Do, d.Ho, d.Wo}, tr);

  const int64_t ck = d.ck();
  const int64_t P = d.patches();
  float* col = conv_scratch<0>(ck * P);
  const float* xv = x.value().data();
  const float* wv = w.value().data();
  float* ov = out.mutable_value().data();
  for (int64_t n = 0; n < d.N; ++n) {
    im2col_3d(xv + n * d.C * d.D * d.H * d.W, d, col);
    // out[n] [F,P] = w [F,ck] * col [ck,P]
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans,
                static_cast<int>(d.F), static_cast<int>(P),
                static_cast<int>(ck), 1.0f, wv, static_cast<int>(ck),
                col, static_cast<int>(P), 0.0f,
                ov + n * d.F * P, static_cast<int>(P));
  }
  if (bias.defined()) {
    const float* bv = bias.value().data();
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t f = 0; f < d.F; ++f) {
        float b = bv[f];
        float* row = ov + (n * d.F + f) * P;
        for (int64_t p = 0; p < P; ++p) row[p] += b;
      }
  }

  if (tr) {
    NodePtr xn = x.node_, wn = w.node_, on = out.node_;
    NodePtr bn = bias.defined() ? bias.node_ : nullptr;
    record([xn, wn, bn, on, d] {
      if (on->grad.empty()) return;
      const int64_t ck = d.ck();
      const int64_t P = d.patches();
      const float* go = on->grad.data();
      float* col = conv_scratch<0>(ck * P);
      float* dcol = conv_scratch<1>(ck * P);
      for (int64_t n = 0; n < d.N; ++n) {
        const float* gn = go + n * d.F * P;
        if (wn->requires_grad) {
          im2col_3d(xn->value.data() + n * d.C * d.D * d.H * d.W, d, col);
          auto gw = grad_of(wn);
          // gw [F,ck] += gn [F,P] * col^T [P,ck]
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans,
                      static_cast<int>(d.F), static_cast<int>(ck),
                      static_cast<int>(P), 1.0f, gn, static_cast<int>(P),
                      col, static_cast<int>(P), 1.0f, gw.data(),
                      static_cast<int>(ck));
        }
        if (xn->requires_grad) {
          // beta 0 overwrites every dcol element, so no zero fill is needed.
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans,
                      static_cast<int>(ck), static_cast<int>(P),
                      static_cast<int>(d.F), 1.0f, wn->value.data(),
                      static_cast<int>(ck), gn, static_cast<int>(P), 0.0f,
                      dcol, static_cast<int>(P));
          auto gx = grad_of(xn);
          col2im_3d(dcol, d, gx.data() + n * d.C * d.D * d.H * d.W);
        }
        if (bn && bn->requires_grad) {
          auto gb = grad_of(bn);
          for (int64_t f = 0; f < d.F; ++f) {
            const float* row = gn + f * P;
            double acc = 0.0;
            for (int64_t p = 0; p < P; ++p) acc += row[p];
            gb[static_cast<size_t>(f)] += static_cast<float>(acc);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// resample3d

namespace {

struct AxisTaps {
  std::vector<int64_t> i0, i1;
  std::vector<float> w1;  // weight on i1; weight on i0 is 1 - w1
};

// Half-pixel-centered doubling: src = (o + 0.5)/2 - 0.5, edges replicated.
AxisTaps trilinear_taps(int64_t in_len) {
  AxisTaps t;
  int64_t out_len = in_len * 2;
  t.i0.resize(static_cast<size_t>(out_len));
  t.i1.resize(static_cast<size_t>(out_len));
  t.w1.resize(static_cast<size_t>(out_len));
  for (int64_t o = 0; o < out_len; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    int64_t lo = static_cast<int64_t>(std::floor(src));
    float frac = static_cast<float>(src - static_cast<double>(lo));
    int64_t i0 = std::clamp<int64_t>(lo, 0, in_len - 1);
    int64_t i1 = std::clamp<int64_t>(lo + 1, 0, in_len - 1);
    t.i0[static_cast<size_t>(o)] = i0;
    t.i1[static_cast<size_t>(o)] = i1;
    t.w1[static_cast<size_t>(o)] = frac;
  }
  return t;
}

}  // namespace

Tensor Tape::resample3d(const Tensor& x, ResampleFactor factor,
                        ResampleMode mode) {
  check_defined(x, "resample3d");
  if (x.rank() != 5) throw ShapeError("resample3d: input must be rank 5");
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];

  if (factor == ResampleFactor::kDown2) {
    if (D % 2 || H % 2 || W % 2) {
      throw ShapeError("resample3d: halving needs even extents, got " +
                       shape_to_string(s));
    }
    int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
    bool tr = track(x);
    Tensor out = make_output({N, C, Do, Ho, Wo}, tr);
    const float* xv = x.value().data();
    float* ov = out.mutable_value().data();
    bool avg = mode == ResampleMode::kTrilinear;
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float* src = xv + nc * D * H * W;
      float* dst = ov + nc * Do * Ho * Wo;
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t xw = 0; xw < Wo; ++xw) {
            const float* p = src + ((2 * z) * H + 2 * y) * W + 2 * xw;
            if (avg) {
              // Source centers straddle the 2x2x2 block evenly.
              float acc = p[0] + p[1] + p[W] + p[W + 1];
              const float* q = p + H * W;
              acc += q[0] + q[1] + q[W] + q[W + 1];
              dst[(z * Ho + y) * Wo + xw] = acc * 0.125f;
            } else {
              dst[(z * Ho + y) * Wo + xw] = p[0];
            }
          }
    }
    if (tr) {
      NodePtr xn = x.node_, on = out.node_;
      record([xn, on, N, C, D, H, W, Do, Ho, Wo, avg] {
        if (on->grad.empty() || !xn->requires_grad) return;
        auto gx = grad_of(xn);
        const float* go = on->grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          float* gsrc = gx.data() + nc * D * H * W;
          const float* gdst = go + nc * Do * Ho * Wo;
          for (int64_t z = 0; z < Do; ++z)
            for (int64_t y = 0; y < Ho; ++y)
              for (int64_t xw = 0; xw < Wo; ++xw) {
                float g = gdst[(z * Ho + y) * Wo + xw];
                float* p = gsrc + ((2 * z) * H + 2 * y) * W + 2 * xw;
                if (avg) {
                  float ge = g * 0.125f;
                  p[0] += ge;
                  p[1] += ge;
                  p[W] += ge;
                  p[W + 1] += ge;
                  float* q = p + H * W;
                  q[0] += ge;
                  q[1] += ge;
                  q[W] += ge;
                  q[W + 1] += ge;
                } else {
                  p[0] += g;
                }
              }
        }
      });
    }
    return out;
  }

  int64_t Do = D * 2, Ho = H * 2, Wo = W * 2;
  bool tr = track(x);
  Tensor out = make_output({N, C, Do, Ho, Wo}, tr);
  const float* xv = x.value().data();
  float* ov = out.mutable_value().data();

  if (mode == ResampleMode::kNearest) {
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float* src = xv + nc * D * H * W;
      float* dst = ov + nc * Do * Ho * Wo;
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y) {
          const float* row = src + ((z >> 1) * H + (y >> 1)) * W;
          float* orow = dst + (z * Ho + y) * Wo;
          for (int64_t xw = 0; xw < Wo; ++xw) orow[xw] = row[xw >> 1];
        }
    }
    if (tr) {
      NodePtr xn = x.node_, on = out.node_;
      record([xn, on, N, C, D, H, W, Do, Ho, Wo] {
        if (on->grad.empty() || !xn->requires_grad) return;
        auto gx = grad_of(xn);
        const float* go = on->grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          float* gsrc = gx.data() + nc * D * H * W;
          const float* gdst = go + nc * Do * Ho * Wo;
          for (int64_t z = 0; z < Do; ++z)
            for (int64_t y = 0; y < Ho; ++y) {
              float* grow = gsrc + ((z >> 1) * H + (y >> 1)) * W;
              const float* orow = gdst + (z * Ho + y) * Wo;
              for (int64_t xw = 0; xw < Wo; ++xw) grow[xw >> 1] += orow[xw];
            }
        }
      });
    }
    return out;
  }

  auto tz = std::make_shared<AxisTaps>(trilinear_taps(D));
  auto ty = std::make_shared<AxisTaps>(trilinear_taps(H));
  auto tx = std::make_shared<AxisTaps>(trilinear_taps(W));
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* src = xv + nc * D * H * W;
    float* dst = ov + nc * Do * Ho * Wo;
    for (int64_t z = 0; z < Do; ++z) {
      int64_t z0 = tz->i0[z], z1 = tz->i1[z];
      float wz1 = tz->w1[z], wz0 = 1.0f - wz1;
      for (int64_t y = 0; y < Ho; ++y) {
        int64_t y0 = ty->i0[y], y1 = ty->i1[y];
        float wy1 = ty->w1[y], wy0 = 1.0f - wy1;
        const float* r00 = src + (z0 * H + y0) * W;
        const float* r01 = src + (z0 * H + y1) * W;
        const float* r10 = src + (z1 * H + y0) * W;
        const float* r11 = src + (z1 * H + y1) * W;
        float* orow = dst + (z * Ho + y) * Wo;
        for (int64_t xw = 0; xw < Wo; ++xw) {
          int64_t x0 = tx->i0[xw], x1 = tx->i1[xw];
          float wx1 = tx->w1[xw], wx0 = 1.0f - wx1;
          float v00 = wx0 * r00[x0] + wx1 * r00[x1];
          float v01 = wx0 * r01[x0] + wx1 * r01[x1];
          float v10 = wx0 * r10[x0] + wx1 * r10[x1];
          float v11 = wx0 * r11[x0] + wx1 * r11[x1];
          orow[xw] = wz0 * (wy0 * v00 + wy1 * v01) + wz1 * (wy0 * v10 + wy1 * v11);
        }
      }
    }
  }
  if (tr) {
    NodePtr xn = x.node_, on = out.node_;
    record([xn, on, N, C, D, H, W, Do, Ho, Wo, tz, ty, tx] {
      if (on->grad.empty() || !xn->requires_grad) return;
      auto gx = grad_of(xn);
      const float* go = on->grad.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        float* gsrc = gx.data() + nc * D * H * W;
        const float* gdst = go + nc * Do * Ho * Wo;
        for (int64_t z = 0; z < Do; ++z) {
          int64_t z0 = tz->i0[z], z1 = tz->i1[z];
          float wz1 = tz->w1[z], wz0 = 1.0f - wz1;
          for (int64_t y = 0; y < Ho; ++y) {
            int64_t y0 = ty->i0[y], y1 = ty->i1[y];
            float wy1 = ty->w1[y], wy0 = 1.0f - wy1;
            float* r00 = gsrc + (z0 * H + y0) * W;
            float* r01 = gsrc + (z0 * H + y1) * W;
            float* r10 = gsrc + (z1 * H + y0) * W;
            float* r11 = gsrc + (z1 * H + y1) * W;
            const float* orow = gdst + (z * Ho + y) * Wo;
            for (int64_t xw = 0; xw < Wo; ++xw) {
              int64_t x0 = tx->i0[xw], x1 = tx->i1[xw];
              float wx1 = tx->w1[xw], wx0 = 1.0f - wx1;
              float g = orow[xw];
              r00[x0] += g * wz0 * wy0 * wx0;
              r00[x1] += g * wz0 * wy0 * wx1;
              r01[x0] += g * wz0 * wy1 * wx0;
              r01[x1] += g * wz0 * wy1 * wx1;
              r10[x0] += g * wz1 * wy0 * wx0;
              r10[x1] += g * wz1 * wy0 * wx1;
              r11[x0] += g * wz1 * wy1 * wx0;
              r11[x1] += g * wz1 * wy1 * wx1;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// instance_norm / channel_affine

Tensor Tape::instance_norm(const Tensor& x, float eps) {
  check_defined(x, "instance_norm");
  if (x.rank() != 5) throw ShapeError("instance_norm: input must be rank 5");
  if (!(eps > 0.0f)) throw ConfigError("instance_norm: eps must be positive");
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1];
  int64_t S = s[2] * s[3] * s[4];
  if (S < 2) {
    throw ShapeError("instance_norm: spatial size must be >= 2 per channel");
  }
  bool tr = track(x);
  Tensor out = make_output(s, tr);
  const float* xv = x.value().data();
  float* ov = out.mutable_value().data();
  auto mu = std::make_shared<std::vector<float>>(static_cast<size_t>(N * C));
  auto inv = std::make_shared<std::vector<float>>(static_cast<size_t>(N * C));
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* src = xv + nc * S;
    double acc = 0.0, acc2 = 0.0;
    for (int64_t i = 0; i < S; ++i) {
      acc += src[i];
      acc2 += static_cast<double>(src[i]) * src[i];
    }
    double m = acc / static_cast<double>(S);
    double var = std::max(0.0, acc2 / static_cast<double>(S) - m * m);
    float mf = static_cast<float>(m);
    float invf = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*mu)[static_cast<size_t>(nc)] = mf;
    (*inv)[static_cast<size_t>(nc)] = invf;
    float* dst = ov + nc * S;
    for (int64_t i = 0; i < S; ++i) dst[i] = (src[i] - mf) * invf;
  }
  if (tr) {
    NodePtr xn = x.node_, on = out.node_;
    record([xn, on, mu, inv, N, C, S] {
      if (on->grad.empty() || !xn->requires_grad) return;
      auto gx = grad_of(xn);
      const float* go = on->grad.data();
      const float* xv = xn->value.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* src = xv + nc * S;
        const float* g = go + nc * S;
        float mf = (*mu)[static_cast<size_t>(nc)];
        float invf = (*inv)[static_cast<size_t>(nc)];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t i = 0; i < S; ++i) {
          float xh = (src[i] - mf) * invf;
          sum_g += g[i];
          sum_gx += static_cast<double>(g[i]) * xh;
        }
        float m1 = static_cast<float>(sum_g / static_cast<double>(S));
        float m2 = static_cast<float>(sum_gx / static_cast<double>(S));
        float* dst = gx.data() + nc * S;
        for (int64_t i = 0; i < S; ++i) {
          float xh = (src[i] - mf) * invf;
          dst[i] += invf * (g[i] - m1 - xh * m2);
        }
      }
    });
  }
  return out;
}

Tensor Tape::instance_norm(const Tensor& x, float eps, const Tensor& scale,
                           const Tensor& shift) {
  return channel_affine(instance_norm(x, eps), scale, shift);
}

Tensor Tape::channel_affine(const Tensor& x, const Tensor& scale,
                            const Tensor& shift) {
  check_defined(x, "channel_affine");
  check_defined(scale, "channel_affine");
  check_defined(shift, "channel_affine");
  if (x.rank() < 2) throw ShapeError("channel_affine: input must be rank >= 2");
  int64_t N = x.shape()[0];
  int64_t C = x.shape()[1];
  int64_t S = x.numel() / (N * C);
  if (scale.shape() != Shape{C} || shift.shape() != Shape{C}) {
    throw ShapeError("channel_affine: scale/shift must be rank-1 [C]");
  }
  bool tr = track(x) || track(scale) || track(shift);
  Tensor out = make_output(x.shape(), tr);
  const float* xv = x.value().data();
  const float* sv = scale.value().data();
  const float* bv = shift.value().data();
  float* ov = out.mutable_value().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float* src = xv + (n * C + c) * S;
      float* dst = ov + (n * C + c) * S;
      float sc = sv[c], sh = bv[c];
      for (int64_t i = 0; i < S; ++i) dst[i] = src[i] * sc + sh;
    }
  if (tr) {
    NodePtr xn = x.node_, sn = scale.node_, bn = shift.node_, on = out.node_;
    record([xn, sn, bn, on, N, C, S] {
      if (on->grad.empty()) return;
      const float* go = on->grad.data();
      if (xn->requires_grad) {
        auto gx = grad_of(xn);
        const float* sv = sn->value.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            float sc = sv[c];
            const float* g = go + (n * C + c) * S;
            float* dst = gx.data() + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) dst[i] += g[i] * sc;
          }
      }
      if (sn->requires_grad) {
        auto gs = grad_of(sn);
        const float* xv = xn->value.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const float* g = go + (n * C + c) * S;
            const float* src = xv + (n * C + c) * S;
            double acc = 0.0;
            for (int64_t i = 0; i < S; ++i) {
              acc += static_cast<double>(g[i]) * src[i];
            }
            gs[static_cast<size_t>(c)] += static_cast<float>(acc);
          }
      }
      if (bn->requires_grad) {
        auto gb = grad_of(bn);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const float* g = go + (n * C + c) * S;
            double acc = 0.0;
            for (int64_t i = 0; i < S; ++i) acc += g[i];
            gb[static_cast<size_t>(c)] += static_cast<float>(acc);
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear / concat / slice / reshape / detach

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_defined(x, "linear");
  check_defined(w, "linear");
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2 [O,M]");
  int64_t O = w.shape()[0];
  int64_t M = w.shape()[1];
  bool batched = x.rank() == 2;
  if (!batched && x.rank() != 1) {
    throw ShapeError("linear: input must be rank 1 or 2");
  }
  int64_t B = batched ? x.shape()[0] : 1;
  int64_t xm = batched ? x.shape()[1] : x.shape()[0];
  if (xm != M) {
    throw ShapeError("linear: input features " + std::to_string(xm) +
                     " do not match weight columns " + std::to_string(M));
  }
  if (bias.defined() && bias.shape() != Shape{O}) {
    throw ShapeError("linear: bias must be [O]");
  }
  bool tr = track(x) || track(w) || (bias.defined() && track(bias));
  Shape out_shape = batched ? Shape{B, O} : Shape{O};
  Tensor out = make_output(out_shape, tr);
  const float* xv = x.value().data();
  const float* wv = w.value().data();
  const float* bv = bias.defined() ? bias.value().data() : nullptr;
  float* ov = out.mutable_value().data();
  for (int64_t b = 0; b < B; ++b) {
    const float* xr = xv + b * M;
    float* orow = ov + b * O;
    for (int64_t o = 0; o < O; ++o) {
      const float* wr = wv + o * M;
      double acc = bv ? bv[o] : 0.0;
      for (int64_t m = 0; m < M; ++m) acc += static_cast<double>(wr[m]) * xr[m];
      orow[o] = static_cast<float>(acc);
    }
  }
  if (tr) {
    NodePtr xn = x.node_, wn = w.node_, on = out.node_;
    NodePtr bn = bias.defined() ? bias.node_ : nullptr;
    record([xn, wn, bn, on, B, O, M] {
      if (on->grad.empty()) return;
      const float* go = on->grad.data();
      for (int64_t b = 0; b < B; ++b) {
        const float* g = go + b * O;
        if (xn->requires_grad) {
          auto gx = grad_of(xn);
          float* dst = gx.data() + b * M;
          for (int64_t o = 0; o < O; ++o) {
            const float* wr = wn->value.data() + o * M;
            float gv = g[o];
            for (int64_t m = 0; m < M; ++m) dst[m] += gv * wr[m];
          }
        }
        if (wn->requires_grad) {
          auto gw = grad_of(wn);
          const float* xr = xn->value.data() + b * M;
          for (int64_t o = 0; o < O; ++o) {
            float* dst = gw.data() + o * M;
            float gv = g[o];
            for (int64_t m = 0; m < M; ++m) dst[m] += gv * xr[m];
          }
        }
        if (bn && bn->requires_grad) {
          auto gb = grad_of(bn);
          for (int64_t o = 0; o < O; ++o) gb[static_cast<size_t>(o)] += g[o];
        }
      }
    });
  }
  return out;
}

Tensor Tape::concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int64_t total = 0;
  bool tr = false;
  for (const Tensor& p : parts) {
    check_defined(p, "concat");
    if (p.rank() != 1) throw ShapeError("concat: inputs must be rank 1");
    total += p.numel();
    tr = tr || track(p);
  }
  Tensor out = make_output({total}, tr);
  float* ov = out.mutable_value().data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    auto pv = p.value();
    std::memcpy(ov + off, pv.data(), pv.size() * sizeof(float));
    off += p.numel();
  }
  if (tr) {
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const Tensor& p : parts) nodes.push_back(p.node_);
    NodePtr on = out.node_;
    record([nodes, on] {
      if (on->grad.empty()) return;
      int64_t off = 0;
      for (const NodePtr& pn : nodes) {
        int64_t n = static_cast<int64_t>(pn->value.size());
        if (pn->requires_grad) {
          auto g = grad_of(pn);
          for (int64_t i = 0; i < n; ++i) g[i] += on->grad[off + i];
        }
        off += n;
      }
    });
  }
  return out;
}

Tensor Tape::slice(const Tensor& a, int64_t offset, int64_t length) {
  check_defined(a, "slice");
  if (a.rank() != 1) throw ShapeError("slice: input must be rank 1");
  if (offset < 0 || length <= 0 || offset + length > a.numel()) {
    throw ShapeError("slice: range [" + std::to_string(offset) + "," +
                     std::to_string(offset + length) + ") out of bounds for " +
                     shape_to_string(a.shape()));
  }
  bool tr = track(a);
  Tensor out = make_output({length}, tr);
  auto av = a.value();
  std::memcpy(out.mutable_value().data(), av.data() + offset,
              static_cast<size_t>(length) * sizeof(float));
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on, offset, length] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (int64_t i = 0; i < length; ++i) g[offset + i] += on->grad[i];
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& a, Shape new_shape) {
  check_defined(a, "reshape");
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) +
                     " as " + shape_to_string(new_shape));
  }
  bool tr = track(a);
  Tensor out = make_output(std::move(new_shape), tr);
  auto av = a.value();
  std::memcpy(out.mutable_value().data(), av.data(), av.size() * sizeof(float));
  if (tr) {
    NodePtr an = a.node_, on = out.node_;
    record([an, on] {
      if (on->grad.empty()) return;
      auto g = grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

Tensor Tape::detach(const Tensor& a) {
  check_defined(a, "detach");
  auto node = std::make_shared<TensorNode>();
  node->shape = a.shape();
  node->value.assign(a.value().begin(), a.value().end());
  node->requires_grad = false;
  return Tensor(std::move(node));
}

}  // namespace harmon
