#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace harmon {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_to_string(const Shape& s);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense float32 array with an optional gradient buffer. Copies are shallow:
// two Tensor handles to the same node share value and grad storage.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float fill, bool requires_grad = false);
  // Validates that data is finite; NaN/Inf input is a NumericError.
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar_tensor(float v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t dim(size_t axis) const;
  size_t rank() const;

  std::span<const float> value() const;
  std::span<float> mutable_value();
  float scalar() const;  // requires numel() == 1

  bool requires_grad() const;
  // Empty span when no gradient has been accumulated yet.
  std::span<const float> grad() const;
  // Allocates a zero-filled buffer on first use.
  std::span<float> mutable_grad();
  void zero_grad();

private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend class Tape;
};

enum class ResampleMode { kNearest, kTrilinear };
enum class ResampleFactor { kUp2, kDown2 };

// Records elementary operations and replays their adjoints in reverse.
// Ops executed while recording is off (or whose inputs carry no gradient)
// compute values only, so the same code path serves inference and the
// "detached" legs of adversarial updates.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Elementwise; shapes must match exactly (no implicit broadcasting).
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, float b);
  Tensor sub(const Tensor& a, float b);
  Tensor sub(float a, const Tensor& b);
  Tensor mul(const Tensor& a, float b);
  Tensor div(const Tensor& a, float b);
  Tensor div(float a, const Tensor& b);
  Tensor neg(const Tensor& a);

  Tensor pow(const Tensor& a, float exponent);
  Tensor sqrt(const Tensor& a);
  Tensor abs(const Tensor& a);
  Tensor tanh(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  Tensor leaky_relu(const Tensor& a, float negative_slope);
  // Gradient passes only strictly inside (lo, hi).
  Tensor clamp(const Tensor& a, float lo, float hi);

  // Reductions over all axes produce shape {1}. Axis subsets drop the
  // reduced dimensions.
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor sum(const Tensor& a, const std::vector<size_t>& axes);
  Tensor mean(const Tensor& a, const std::vector<size_t>& axes);
  // unbiased divides by n-1 (requires n >= 2), otherwise by n.
  Tensor var(const Tensor& a, bool unbiased);
  Tensor var(const Tensor& a, const std::vector<size_t>& axes, bool unbiased);

  // x: [N,C,D,H,W], w: [F,C,kd,kh,kw], bias: [F] or undefined.
  // Zero padding, cubic stride. Backed by im2col + sgemm.
  Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
                int stride, int padding);

  // Doubles or halves each spatial dimension of [N,C,D,H,W]. Halving
  // requires even extents; trilinear halving averages 2x2x2 blocks.
  Tensor resample3d(const Tensor& x, ResampleFactor factor, ResampleMode mode);

  // Per-(sample, channel) standardization over spatial axes of [N,C,D,H,W].
  // Spatial size must be >= 2. The affine overload applies scale/shift [C]
  // after normalization, so it doubles as an externally-driven style
  // injection point.
  Tensor instance_norm(const Tensor& x, float eps);
  Tensor instance_norm(const Tensor& x, float eps, const Tensor& scale,
                       const Tensor& shift);
  // y[n,c,...] = x[n,c,...] * scale[c] + shift[c]; scale/shift are rank-1 [C].
  Tensor channel_affine(const Tensor& x, const Tensor& scale,
                        const Tensor& shift);

  // x: [M] or [N,M]; w: [O,M]; bias: [O] or undefined.
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

  // Rank-1 utilities.
  Tensor concat(const std::vector<Tensor>& parts);
  Tensor slice(const Tensor& a, int64_t offset, int64_t length);

  Tensor reshape(const Tensor& a, Shape new_shape);
  // Value copy that blocks gradient flow.
  Tensor detach(const Tensor& a);

  // root must be scalar. Seeds d(root)/d(root) = 1 and replays the tape.
  // Leaves accumulate additively; call zero_grad between steps.
  void backward(const Tensor& root);

private:
  Tensor make_output(Shape shape, bool track);
  bool track(const Tensor& a) const;
  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

  std::vector<std::function<void()>> steps_;
  bool recording_ = true;
};

}  // namespace harmon
