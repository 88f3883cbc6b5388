#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tbloc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// Dense row-major array of doubles with optional reverse-mode gradient
// tracking. Copies of a Tensor handle share storage; clone() deep-copies.
//
// Image maps follow the N,C,H,W convention. An op result records the node
// that produced it when grad mode is on and at least one input requires a
// gradient; Tensor::backward() replays those nodes in reverse topological
// order and accumulates into the grad buffers of requires_grad leaves.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  // Only valid on leaves (tensors not produced by a recorded op).
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the values without the producing node or grad tracking.
  Tensor detach() const;
  Tensor clone() const;

  // Seeds d(this)/d(this) = 1 and propagates to every requires_grad leaf.
  // Requires a scalar (single element) tensor. Each recorded graph can be
  // replayed once; gradients on leaves accumulate across calls until
  // zero_grad().
  void backward() const;

  // Used by op implementations.
  using BackwardFn = std::function<void(std::span<const double> out_grad,
                                        std::span<std::span<double>> in_grads)>;
  // Builds an op result. When grad recording is active and some input
  // requires a gradient, `backward_fn` is stored and later called with the
  // output gradient and one span per input (empty when that input does not
  // need a gradient). The function must only accumulate (+=) into spans.
  static Tensor from_op(Shape shape, std::vector<double> data,
                        std::vector<Tensor> inputs, BackwardFn backward_fn);

  const detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

enum class Padding { kSame, kValid };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::kSame;
};

// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw] plus b[Cout].
// Same padding is zero padding with out = ceil(in / stride); when the total
// pad is odd the extra row/column goes to the bottom/right.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              Conv2dOptions options = {});

// 2x2 max pool, stride 2. Odd extents are padded with one row/column of -1e30.
// Ties resolve to the first element of the window in row-major order.
Tensor max_pool2(const Tensor& x);

// Nearest-neighbour 2x upsampling.
Tensor upsample2(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

// x[N,D] * w[D,M] + b[M]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);

// Concatenates [N,Ci,H,W] tensors along the channel axis.
Tensor concat_channels(std::span<const Tensor> parts);

// Rearranges per-level head maps [1, A*width, H, W] into one [total, width]
// matrix whose rows follow level, row-major cell, then anchor slot order.
Tensor flatten_anchor_maps(std::span<const Tensor> maps, std::size_t width);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool ok = false;  // max_rel_error <= tolerance
};

// Compares the reverse-mode gradient of scalar `f` at `point` against central
// differences, coordinate by coordinate:
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// The difference quotient divides by the representable distance between the
// two probe points rather than by 2*step.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tolerance);

}  // namespace tbloc
