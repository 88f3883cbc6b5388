#include "tbloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "tbloc/error.hpp"

namespace tbloc {

namespace detail {

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  Tensor::BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using detail::TensorImpl;

void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  require(t.defined(), std::string(op) + ": " + name + " is undefined");
  if (t.rank() != rank) {
    throw InvalidArgument(std::string(op) + ": " + name + " must have rank " +
                          std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto extent : shape) require(extent > 0, "tensor extents must be positive");
  if (shape_numel(shape) != data.size()) {
    throw InvalidArgument("tensor data size " + std::to_string(data.size()) +
                          " does not match shape " + shape_to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) throw InvalidArgument("tensor axis out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw InvalidArgument("item() needs a single-element tensor, got " +
                          shape_to_string(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw StateError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  if (on && impl_->grad.size() != impl_->data.size()) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  }
  if (!on) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }
bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient buffer");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw StateError("tensor has no gradient buffer");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_data(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const {
  Tensor out = from_data(impl_->shape, impl_->data, impl_->requires_grad && is_leaf());
  return out;
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                       BackwardFn backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool record = g_grad_enabled &&
                      std::any_of(inputs.begin(), inputs.end(),
                                  [](const Tensor& t) { return t.requires_grad(); });
  if (record) {
    auto node = std::make_shared<Node>();
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl_);
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  if (!defined()) throw InvalidArgument("backward on an undefined tensor");
  if (numel() != 1) {
    throw InvalidArgument("backward needs a scalar loss, got shape " + shape_to_string(shape()));
  }
  if (!impl_->requires_grad) {
    throw InvalidArgument("backward on a tensor that does not require grad");
  }

  // Post-order DFS gives a topological order (inputs before consumers).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && t->node->consumed) {
      throw StateError("backward: graph already consumed");
    }
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  for (TensorImpl* t : order) {
    if (t->grad.size() != t->data.size()) t->grad.assign(t->data.size(), 0.0);
  }
  impl_->grad[0] += 1.0;

  std::vector<std::span<double>> in_grads;
  // Inputs released from consumed nodes stay alive until the pass ends, since
  // `order` holds raw pointers into the graph.
  std::vector<std::shared_ptr<TensorImpl>> released;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node) continue;
    Node& node = *t->node;
    in_grads.clear();
    for (auto& in : node.inputs) {
      if (in->requires_grad) {
        in_grads.emplace_back(in->grad);
      } else {
        in_grads.emplace_back();
      }
    }
    node.backward(t->grad, in_grads);
    node.consumed = true;
    node.backward = nullptr;
    for (auto& in : node.inputs) released.push_back(std::move(in));
    node.inputs.clear();
    t->grad.clear();
    t->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t out_h, out_w;
  long pad_top, pad_left;
};

ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                           Conv2dOptions options) {
  ConvGeometry g{};
  const auto s = options.stride;
  if (options.padding == Padding::kSame) {
    g.out_h = (h + s - 1) / s;
    g.out_w = (w + s - 1) / s;
    const long total_h = std::max<long>(0, static_cast<long>((g.out_h - 1) * s + kh) - static_cast<long>(h));
    const long total_w = std::max<long>(0, static_cast<long>((g.out_w - 1) * s + kw) - static_cast<long>(w));
    g.pad_top = total_h / 2;
    g.pad_left = total_w / 2;
  } else {
    if (h < kh || w < kw) throw InvalidArgument("conv2d: valid padding yields an empty output");
    g.out_h = (h - kh) / s + 1;
    g.out_w = (w - kw) / s + 1;
    g.pad_top = g.pad_left = 0;
  }
  if (g.out_h == 0 || g.out_w == 0) throw InvalidArgument("conv2d: zero-sized output");
  return g;
}

// Range of output columns ox for which ox*s + k - pad lies in [0, extent).
std::pair<long, long> valid_range(long extent, long out_extent, long s, long k, long pad) {
  const long lo_num = pad - k;
  long lo = lo_num <= 0 ? 0 : (lo_num + s - 1) / s;
  const long hi_num = extent - 1 + pad - k;
  long hi = hi_num < 0 ? 0 : hi_num / s + 1;
  lo = std::min(lo, out_extent);
  hi = std::clamp(hi, lo, out_extent);
  return {lo, hi};
}

struct ConvPlan {
  std::size_t cin, h, w, kh, kw, ho, wo;
  long s, pad_top, pad_left;
  std::vector<std::pair<long, long>> rows, cols;
};

// col[(ci*kh + ky)*kw + kx][oy*wo + ox] = x[ci][oy*s + ky - pad][ox*s + kx - pad], zero outside.
void im2col(const ConvPlan& p, const double* x, double* col) {
  const std::size_t pn = p.ho * p.wo;
  for (std::size_t ci = 0; ci < p.cin; ++ci) {
    const double* src = x + ci * p.h * p.w;
    for (std::size_t ky = 0; ky < p.kh; ++ky) {
      const auto [oy0, oy1] = p.rows[ky];
      for (std::size_t kx = 0; kx < p.kw; ++kx) {
        double* dst = col + ((ci * p.kh + ky) * p.kw + kx) * pn;
        std::fill(dst, dst + pn, 0.0);
        const auto [ox0, ox1] = p.cols[kx];
        const long off = static_cast<long>(kx) - p.pad_left;
        for (long oy = oy0; oy < oy1; ++oy) {
          const long iy = oy * p.s + static_cast<long>(ky) - p.pad_top;
          const double* srow = src + iy * static_cast<long>(p.w) + off;
          double* drow = dst + oy * static_cast<long>(p.wo);
          if (p.s == 1) {
            std::copy(srow + ox0, srow + ox1, drow + ox0);
          } else {
            for (long ox = ox0; ox < ox1; ++ox) drow[ox] = srow[ox * p.s];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates col back into gx.
void col2im(const ConvPlan& p, const double* col, double* gx) {
  const std::size_t pn = p.ho * p.wo;
  for (std::size_t ci = 0; ci < p.cin; ++ci) {
    double* dst = gx + ci * p.h * p.w;
    for (std::size_t ky = 0; ky < p.kh; ++ky) {
      const auto [oy0, oy1] = p.rows[ky];
      for (std::size_t kx = 0; kx < p.kw; ++kx) {
        const double* src = col + ((ci * p.kh + ky) * p.kw + kx) * pn;
        const auto [ox0, ox1] = p.cols[kx];
        const long off = static_cast<long>(kx) - p.pad_left;
        for (long oy = oy0; oy < oy1; ++oy) {
          const long iy = oy * p.s + static_cast<long>(ky) - p.pad_top;
          double* drow = dst + iy * static_cast<long>(p.w) + off;
          const double* srow = src + oy * static_cast<long>(p.wo);
          if (p.s == 1) {
            for (long ox = ox0; ox < ox1; ++ox) drow[ox] += srow[ox];
          } else {
            for (long ox = ox0; ox < ox1; ++ox) drow[ox * p.s] += srow[ox];
          }
        }
      }
    }
  }
}

constexpr std::size_t kBlock = 256;

// c[m x n] += a[m x k] * b[k x n], row-major.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = c + i * n + j0;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t q = 0; q < k; ++q) {
        const double a0 = a[i * k + q], a1 = a[(i + 1) * k + q];
        const double a2 = a[(i + 2) * k + q], a3 = a[(i + 3) * k + q];
        const double* br = b + q * n + j0;
#pragma omp simd
        for (std::size_t j = 0; j < jn; ++j) {
          const double bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* ci = c + i * n + j0;
      for (std::size_t q = 0; q < k; ++q) {
        const double av = a[i * k + q];
        const double* br = b + q * n + j0;
#pragma omp simd
        for (std::size_t j = 0; j < jn; ++j) ci[j] += av * br[j];
      }
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n], row-major.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = c + i * n + j0;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t q = 0; q < k; ++q) {
        const double* ar = a + q * m + i;
        const double a0 = ar[0], a1 = ar[1], a2 = ar[2], a3 = ar[3];
        const double* br = b + q * n + j0;
#pragma omp simd
        for (std::size_t j = 0; j < jn; ++j) {
          const double bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* ci = c + i * n + j0;
      for (std::size_t q = 0; q < k; ++q) {
        const double av = a[q * m + i];
        const double* br = b + q * n + j0;
#pragma omp simd
        for (std::size_t j = 0; j < jn; ++j) ci[j] += av * br[j];
      }
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T, row-major.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    std::size_t j = 0;
    for (; j + 2 <= n; j += 2) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      double s00 = 0.0, s01 = 0.0, s10 = 0.0, s11 = 0.0;
#pragma omp simd reduction(+ : s00, s01, s10, s11)
      for (std::size_t q = 0; q < k; ++q) {
        s00 += a0[q] * b0[q];
        s01 += a0[q] * b1[q];
        s10 += a1[q] * b0[q];
        s11 += a1[q] * b1[q];
      }
      c[i * n + j] += s00;
      c[i * n + j + 1] += s01;
      c[(i + 1) * n + j] += s10;
      c[(i + 1) * n + j + 1] += s11;
    }
    for (; j < n; ++j) {
      const double* b0 = b + j * k;
      double s0 = 0.0, s1 = 0.0;
#pragma omp simd reduction(+ : s0, s1)
      for (std::size_t q = 0; q < k; ++q) {
        s0 += a0[q] * b0[q];
        s1 += a1[q] * b0[q];
      }
      c[i * n + j] += s0;
      c[(i + 1) * n + j] += s1;
    }
  }
  for (; i < m; ++i) {
    const double* a0 = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b0 = b + j * k;
      double s0 = 0.0;
#pragma omp simd reduction(+ : s0)
      for (std::size_t q = 0; q < k; ++q) s0 += a0[q] * b0[q];
      c[i * n + j] += s0;
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dOptions options) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "kernel");
  require_rank(b, 1, "conv2d", "bias");
  require(options.stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw InvalidArgument("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                          std::to_string(w.dim(1)));
  }
  require(b.dim(0) == cout, "conv2d: bias length must equal output channels");
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");

  const auto g = conv_geometry(h, wd, kh, kw, options);
  ConvPlan plan{cin, h, wd, kh, kw, g.out_h, g.out_w, static_cast<long>(options.stride),
                g.pad_top, g.pad_left, {}, {}};
  for (std::size_t ky = 0; ky < kh; ++ky) {
    plan.rows.push_back(valid_range(static_cast<long>(h), static_cast<long>(plan.ho), plan.s,
                                    static_cast<long>(ky), g.pad_top));
  }
  for (std::size_t kx = 0; kx < kw; ++kx) {
    plan.cols.push_back(valid_range(static_cast<long>(wd), static_cast<long>(plan.wo), plan.s,
                                    static_cast<long>(kx), g.pad_left));
  }
  const std::size_t pn = plan.ho * plan.wo;
  const std::size_t kn = cin * kh * kw;

  std::vector<double> out(n * cout * pn);
  std::vector<double> col(kn * pn);
  const auto xd = x.data();
  const auto wdata = w.data();
  const auto bd = b.data();
  for (std::size_t in = 0; in < n; ++in) {
    double* o = out.data() + in * cout * pn;
    for (std::size_t co = 0; co < cout; ++co) std::fill(o + co * pn, o + (co + 1) * pn, bd[co]);
    im2col(plan, xd.data() + in * cin * h * wd, col.data());
    gemm_nn(cout, pn, kn, wdata.data(), col.data(), o);
  }

  auto backward = [x, w, n, cout, pn, kn, plan](std::span<const double> gout,
                                                std::span<std::span<double>> grads) {
    auto gx = grads[0];
    auto gw = grads[1];
    auto gb = grads[2];
    const auto xd = x.data();
    const auto wdata = w.data();
    const std::size_t xsize = plan.cin * plan.h * plan.w;
    std::vector<double> col(kn * pn);
    for (std::size_t in = 0; in < n; ++in) {
      const double* go = gout.data() + in * cout * pn;
      if (!gb.empty()) {
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          const double* row = go + co * pn;
#pragma omp simd reduction(+ : acc)
          for (std::size_t i = 0; i < pn; ++i) acc += row[i];
          gb[co] += acc;
        }
      }
      if (!gw.empty()) {
        im2col(plan, xd.data() + in * xsize, col.data());
        gemm_nt(cout, kn, pn, go, col.data(), gw.data());
      }
      if (!gx.empty()) {
        std::fill(col.begin(), col.end(), 0.0);
        gemm_tn(kn, pn, cout, wdata.data(), go, col.data());
        col2im(plan, col.data(), gx.data() + in * xsize);
      }
    }
  };
  return Tensor::from_op({n, cout, plan.ho, plan.wo}, std::move(out), {x, w, b}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Spatial ops

Tensor max_pool2(const Tensor& x) {
  require_rank(x, 4, "max_pool2", "input");
  constexpr double kSentinel = -1e30;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  std::vector<double> out(n * c * ho * wo);
  // Flat source index of the winner, per output cell.
  std::vector<std::size_t> argmax(out.size());
  const auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xd.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double best = kSentinel;
        std::size_t best_idx = (2 * oy) * w + 2 * ox;
        bool found = false;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
            const double v = (iy < h && ix < w) ? src[iy * w + ix] : kSentinel;
            if (!found || v > best) {
              if (iy < h && ix < w) best_idx = iy * w + ix;
              best = v;
              found = true;
            }
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = plane * h * w + best_idx;
      }
    }
  }
  auto backward = [argmax = std::move(argmax)](std::span<const double> gout,
                                               std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t o = 0; o < gout.size(); ++o) grads[0][argmax[o]] += gout[o];
  };
  return Tensor::from_op({n, c, ho, wo}, std::move(out), {x}, std::move(backward));
}

Tensor upsample2(const Tensor& x) {
  require_rank(x, 4, "upsample2", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<double> out(n * c * ho * wo);
  const auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        out[(plane * ho + oy) * wo + ox] = xd[(plane * h + oy / 2) * w + ox / 2];
      }
    }
  }
  auto backward = [n, c, h, w](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    const std::size_t ho = 2 * h, wo = 2 * w;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          grads[0][(plane * h + oy / 2) * w + ox / 2] += gout[(plane * ho + oy) * wo + ox];
        }
      }
    }
  };
  return Tensor::from_op({n, c, ho, wo}, std::move(out), {x}, std::move(backward));
}

Tensor relu(const Tensor& x) {
  require(x.defined(), "relu: undefined input");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  auto backward = [x](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    const auto xd = x.data();
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (xd[i] > 0.0) grads[0][i] += gout[i];
    }
  };
  return Tensor::from_op(x.shape(), std::move(out), {x}, std::move(backward));
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
  require(x.defined(), "sigmoid: undefined input");
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(xd[i]);
  auto backward = [values = out](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t i = 0; i < gout.size(); ++i) {
      grads[0][i] += gout[i] * values[i] * (1.0 - values[i]);
    }
  };
  return Tensor::from_op(x.shape(), std::move(out), {x}, std::move(backward));
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * c);
  const auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xd[plane * hw + i];
    out[plane] = acc / static_cast<double>(hw);
  }
  auto backward = [hw](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t plane = 0; plane < gout.size(); ++plane) {
      const double gv = gout[plane] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) grads[0][plane * hw + i] += gv;
    }
  };
  return Tensor::from_op({n, c}, std::move(out), {x}, std::move(backward));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  require_rank(b, 1, "linear", "bias");
  const std::size_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
  if (w.dim(0) != d) {
    throw InvalidArgument("linear: input width " + std::to_string(d) + " does not match weight " +
                          shape_to_string(w.shape()));
  }
  require(b.dim(0) == m, "linear: bias length must equal output width");
  std::vector<double> out(n * m);
  const auto xd = x.data();
  const auto wdata = w.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = bd[j];
    for (std::size_t k = 0; k < d; ++k) {
      const double xv = xd[r * d + k];
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] += xv * wdata[k * m + j];
    }
  }
  auto backward = [x, w, n, d, m](std::span<const double> gout, std::span<std::span<double>> grads) {
    const auto xd = x.data();
    const auto wdata = w.data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < d; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          acc += gout[r * m + j] * wdata[k * m + j];
          if (!grads[1].empty()) grads[1][k * m + j] += xd[r * d + k] * gout[r * m + j];
        }
        if (!grads[0].empty()) grads[0][r * d + k] += acc;
      }
      if (!grads[2].empty()) {
        for (std::size_t j = 0; j < m; ++j) grads[2][j] += gout[r * m + j];
      }
    }
  };
  return Tensor::from_op({n, m}, std::move(out), {x, w, b}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "add: undefined input");
  if (a.shape() != b.shape()) {
    throw InvalidArgument("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                          shape_to_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  auto backward = [](std::span<const double> gout, std::span<std::span<double>> grads) {
    for (auto g : grads) {
      if (g.empty()) continue;
      for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
    }
  };
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, std::move(backward));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "mul: undefined input");
  if (a.shape() != b.shape()) {
    throw InvalidArgument("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                          shape_to_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  auto backward = [a, b](std::span<const double> gout, std::span<std::span<double>> grads) {
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (!grads[0].empty()) grads[0][i] += gout[i] * b.at(i);
      if (!grads[1].empty()) grads[1][i] += gout[i] * a.at(i);
    }
  };
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, std::move(backward));
}

Tensor scale(const Tensor& x, double factor) {
  require(x.defined(), "scale: undefined input");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto backward = [factor](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t i = 0; i < gout.size(); ++i) grads[0][i] += gout[i] * factor;
  };
  return Tensor::from_op(x.shape(), std::move(out), {x}, std::move(backward));
}

Tensor sum(const Tensor& x) {
  require(x.defined(), "sum: undefined input");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto backward = [](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (auto& g : grads[0]) g += gout[0];
  };
  return Tensor::from_op({1}, {acc}, {x}, std::move(backward));
}

Tensor concat_channels(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels", "part");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    require(p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
            "concat_channels: parts disagree on N/H/W");
    total_c += p.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<double> out(n * total_c * hw);
  std::vector<std::size_t> offsets;
  std::size_t c_off = 0;
  for (const auto& p : parts) {
    offsets.push_back(c_off);
    const std::size_t c = p.dim(1);
    for (std::size_t in = 0; in < n; ++in) {
      std::copy_n(p.data().begin() + in * c * hw, c * hw, out.begin() + (in * total_c + c_off) * hw);
    }
    c_off += c;
  }
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  auto backward = [n, hw, total_c, offsets, widths](std::span<const double> gout,
                                                    std::span<std::span<double>> grads) {
    for (std::size_t k = 0; k < grads.size(); ++k) {
      if (grads[k].empty()) continue;
      const std::size_t c = widths[k];
      for (std::size_t in = 0; in < n; ++in) {
        const double* src = gout.data() + (in * total_c + offsets[k]) * hw;
        double* dst = grads[k].data() + in * c * hw;
        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  };
  return Tensor::from_op({n, total_c, h, w}, std::move(out),
                         std::vector<Tensor>(parts.begin(), parts.end()), std::move(backward));
}

Tensor flatten_anchor_maps(std::span<const Tensor> maps, std::size_t width) {
  require(!maps.empty(), "flatten_anchor_maps: no inputs");
  require(width >= 1, "flatten_anchor_maps: width must be positive");
  std::size_t rows = 0;
  for (const auto& m : maps) {
    require_rank(m, 4, "flatten_anchor_maps", "map");
    require(m.dim(0) == 1, "flatten_anchor_maps: batch size must be 1");
    require(m.dim(1) % width == 0, "flatten_anchor_maps: channels not a multiple of width");
    rows += m.dim(2) * m.dim(3) * (m.dim(1) / width);
  }
  std::vector<double> out(rows * width);
  // For each output element, the (map, flat source index) it came from.
  std::vector<std::pair<std::size_t, std::size_t>> source(out.size());
  std::size_t r = 0;
  for (std::size_t mi = 0; mi < maps.size(); ++mi) {
    const auto& m = maps[mi];
    const std::size_t c = m.dim(1), h = m.dim(2), w = m.dim(3);
    const std::size_t slots = c / width;
    const auto md = m.data();
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t a = 0; a < slots; ++a, ++r) {
          for (std::size_t k = 0; k < width; ++k) {
            const std::size_t src = ((a * width + k) * h + i) * w + j;
            out[r * width + k] = md[src];
            source[r * width + k] = {mi, src};
          }
        }
      }
    }
  }
  auto backward = [source = std::move(source)](std::span<const double> gout,
                                               std::span<std::span<double>> grads) {
    for (std::size_t i = 0; i < gout.size(); ++i) {
      auto g = grads[source[i].first];
      if (!g.empty()) g[source[i].second] += gout[i];
    }
  };
  return Tensor::from_op({rows, width}, std::move(out),
                         std::vector<Tensor>(maps.begin(), maps.end()), std::move(backward));
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double step, double tolerance) {
  require(step > 0.0, "grad_check: step must be positive");
  Tensor x = Tensor::from_data(point.shape(), std::vector<double>(point.data().begin(), point.data().end()),
                               true);
  Tensor y = f(x);
  if (y.numel() != 1) throw InvalidArgument("grad_check: function must be scalar-valued");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
  std::vector<double> analytic(x.numel(), 0.0);
  if (y.requires_grad()) {
    y.backward();
    std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    const double hi = orig + step;
    const double lo = orig - step;
    probe[i] = hi;
    const double f_hi = f(Tensor::from_data(point.shape(), probe)).item();
    probe[i] = lo;
    const double f_lo = f(Tensor::from_data(point.shape(), probe)).item();
    probe[i] = orig;
    if (!std::isfinite(f_hi) || !std::isfinite(f_lo)) {
      throw NumericError("grad_check: non-finite evaluation at coordinate " + std::to_string(i));
    }
    const double numeric = (f_hi - f_lo) / (hi - lo);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  result.ok = result.max_rel_error <= tolerance;
  return result;
}

}  // namespace tbloc
