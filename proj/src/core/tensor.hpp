#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "core/error.hpp"
#include "core/gemm.hpp"

namespace ssgan {

/// Training/eval switch threaded through ops whose forward depends on it
/// (batch statistics vs. running statistics).
enum class Mode { train, eval };

namespace detail {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace detail

/// Allocator pinning payloads to 64-byte boundaries. SIMD code paths split
/// their work by runtime pointer alignment when buffers are only
/// malloc-aligned, and elements land in differently-rounded scalar/vector
/// lanes from run to run; a fixed alignment keeps every pass
/// bit-reproducible. (Cache-line alignment is also simply faster.)
template <typename T>
struct AlignedAlloc {
  using value_type = T;
  AlignedAlloc() noexcept = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{64}); }
  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const noexcept {
    return true;
  }
};

/// Tensor payload buffer.
template <typename S>
using AVec = std::vector<S, AlignedAlloc<S>>;

/// Element comparison across allocator types, so payloads compare against
/// plain vectors; same-allocator pairs still pick the standard overload.
template <typename T, typename A, typename B>
bool operator==(const std::vector<T, A>& a, const std::vector<T, B>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

template <typename S>
struct TensorData {
  std::vector<std::size_t> shape;
  AVec<S> values;
  AVec<S> grad;  // empty until a backward pass touches this tensor
  bool requires_grad = false;
};

/// Dense row-major tensor with shared-payload value semantics: copies alias
/// the same buffer, clone() deep-copies. A scalar is any tensor with one
/// element (rank 0 or otherwise).
template <typename S>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->values.assign(detail::shape_numel(shape), S(0));
    t.d_->shape = std::move(shape);
    return t;
  }

  static Tensor full(std::vector<std::size_t> shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), v);
    return t;
  }

  static Tensor scalar(S v) { return full({}, v); }

  static Tensor from(std::vector<std::size_t> shape, std::vector<S> values) {
    require(detail::shape_numel(shape) == values.size(), ErrCode::shape_mismatch,
            "Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                detail::shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t numel() const { return d_->values.size(); }

  S* data() { return d_->values.data(); }
  const S* data() const { return d_->values.data(); }
  std::vector<S>& values() { return d_->values; }
  const std::vector<S>& values() const { return d_->values; }

  S item() const {
    require(numel() == 1, ErrCode::shape_mismatch,
            "Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return d_->values[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  bool grad_present() const { return !d_->grad.empty(); }
  const std::vector<S>& grad() const {
    require(grad_present(), ErrCode::invalid_argument, "Tensor::grad: no gradient present");
    return d_->grad;
  }
  /// Gradient buffer, allocated zero-filled on first use.
  std::vector<S>& grad_accum() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), S(0));
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  /// Deep copy of values only (no grad, requires_grad off).
  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    return t;
  }

  std::shared_ptr<TensorData<S>> handle() const { return d_; }

private:
  std::shared_ptr<TensorData<S>> d_;
};

/// Per-channel running statistics for batch normalization.
template <typename S>
struct BatchNormState {
  std::vector<S> running_mean;
  std::vector<S> running_var;
  S momentum = S(0.9);

  void init(std::size_t channels) {
    running_mean.assign(channels, S(0));
    running_var.assign(channels, S(1));
  }
};

namespace detail {

template <typename S>
void check_finite(const std::vector<S>& v, const char* op) {
  Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> m(v.data(),
                                                         static_cast<Eigen::Index>(v.size()));
  if (!m.allFinite()) raise(ErrCode::numeric, std::string(op) + ": non-finite value produced");
}

/// Hands out reusable per-thread buffers for convolution staging. A fresh
/// multi-megabyte vector per call is served by mmap and repays its pages in
/// soft faults on every touch; pooling keeps the pages mapped. Every user
/// overwrites the full extent it asks for, so stale contents are never read.
template <typename S>
class Scratch {
public:
  explicit Scratch(std::size_t n) {
    auto& p = pool();
    std::size_t best = p.size();
    for (std::size_t i = 0; i < p.size(); ++i)  // smallest buffer that fits
      if (p[i].size() >= n && (best == p.size() || p[i].size() < p[best].size())) best = i;
    if (best == p.size())  // none fits: grow the largest
      for (std::size_t i = 0; i < p.size(); ++i)
        if (best == p.size() || p[i].size() > p[best].size()) best = i;
    if (best != p.size()) {
      buf_ = std::move(p[best]);
      p.erase(p.begin() + static_cast<std::ptrdiff_t>(best));
    }
    if (buf_.size() < n) buf_.resize(n);
  }
  ~Scratch() { pool().push_back(std::move(buf_)); }
  Scratch(const Scratch&) = delete;
  Scratch& operator=(const Scratch&) = delete;

  S* data() { return buf_.data(); }

private:
  static std::vector<std::vector<S>>& pool() {
    thread_local std::vector<std::vector<S>> p;
    return p;
  }
  std::vector<S> buf_;
};

// Patch positions p in [lo, hi) are exactly those with
// 0 <= p*stride + off - pad < extent. Hoisting this range out of the copy
// loops removes the per-element bounds branch, which dominates otherwise.
inline std::pair<std::size_t, std::size_t> patch_range(std::size_t extent, std::size_t off,
                                                       std::size_t stride, std::size_t pad,
                                                       std::size_t P) {
  std::size_t lo = (pad > off) ? (pad - off + stride - 1) / stride : 0;
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(extent) - 1 +
                             static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(off);
  std::size_t hi = (top < 0) ? 0 : std::min(P, static_cast<std::size_t>(top) / stride + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

// im2col: cols[(c*k+i)*k+j][b*Hp*Wp + hp*Wp + wp] =
//   src[b, c, hp*stride - pad + i, wp*stride - pad + j], zero outside the image.
// (Hp, Wp) is the patch-position grid; for a plain convolution it is the
// output extent, for the transposed convolution paths it is the input extent.
template <typename S>
void im2col(const S* src, std::size_t B, std::size_t C, std::size_t Hs, std::size_t Ws,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t Hp, std::size_t Wp,
            S* cols) {
  const std::size_t cols_w = B * Hp * Wp;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < k; ++i) {
      const auto [hp_lo, hp_hi] = patch_range(Hs, i, stride, pad, Hp);
      for (std::size_t j = 0; j < k; ++j) {
        const auto [wp_lo, wp_hi] = patch_range(Ws, j, stride, pad, Wp);
        S* row = cols + ((c * k + i) * k + j) * cols_w;
        for (std::size_t b = 0; b < B; ++b) {
          const S* sbase = src + (b * C + c) * Hs * Ws;
          S* cbase = row + b * Hp * Wp;
          std::fill(cbase, cbase + hp_lo * Wp, S(0));
          for (std::size_t hp = hp_lo; hp < hp_hi; ++hp) {
            const S* srow = sbase + (hp * stride + i - pad) * Ws;
            S* dst = cbase + hp * Wp;
            std::fill(dst, dst + wp_lo, S(0));
            if (stride == 1) {
              std::copy_n(srow + (wp_lo + j - pad), wp_hi - wp_lo, dst + wp_lo);
            } else {
              std::size_t x = wp_lo * stride + j - pad;
              for (std::size_t wp = wp_lo; wp < wp_hi; ++wp, x += stride) dst[wp] = srow[x];
            }
            std::fill(dst + wp_hi, dst + Wp, S(0));
          }
          std::fill(cbase + hp_hi * Wp, cbase + Hp * Wp, S(0));
        }
      }
    }
  }
}

// Scatter-add inverse of im2col: dst[b, c, hp*stride-pad+i, wp*stride-pad+j] += cols[...].
template <typename S>
void col2im_add(const S* cols, std::size_t B, std::size_t C, std::size_t Hd, std::size_t Wd,
                std::size_t k, std::size_t stride, std::size_t pad, std::size_t Hp, std::size_t Wp,
                S* dst) {
  const std::size_t cols_w = B * Hp * Wp;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < k; ++i) {
      const auto [hp_lo, hp_hi] = patch_range(Hd, i, stride, pad, Hp);
      for (std::size_t j = 0; j < k; ++j) {
        const auto [wp_lo, wp_hi] = patch_range(Wd, j, stride, pad, Wp);
        const S* row = cols + ((c * k + i) * k + j) * cols_w;
        for (std::size_t b = 0; b < B; ++b) {
          S* dbase = dst + (b * C + c) * Hd * Wd;
          const S* cbase = row + b * Hp * Wp;
          for (std::size_t hp = hp_lo; hp < hp_hi; ++hp) {
            S* drow = dbase + (hp * stride + i - pad) * Wd;
            const S* crow = cbase + hp * Wp;
            if (stride == 1) {
              S* d0 = drow + (wp_lo + j - pad);
              const S* c0 = crow + wp_lo;
              const std::size_t span = wp_hi - wp_lo;
              for (std::size_t t = 0; t < span; ++t) d0[t] += c0[t];
            } else {
              std::size_t x = wp_lo * stride + j - pad;
              for (std::size_t wp = wp_lo; wp < wp_hi; ++wp, x += stride) drow[x] += crow[wp];
            }
          }
        }
      }
    }
  }
}

// Direct 3x3 stride-1 pad-1 cross-correlation, accumulating into out. Used
// for small filter counts (the image-space output head), where the patch
// matrix would be a 9x-input-sized buffer feeding a few-row GEMM — all
// memory traffic. The direct form keeps each image row in cache.
template <typename S>
void conv3x3_acc(const S* x, const S* kernel, S* out, std::size_t B, std::size_t C, std::size_t H,
                 std::size_t W, std::size_t F) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S* xc = x + (b * C + c) * H * W;
      for (std::size_t f = 0; f < F; ++f) {
        const S* kfc = kernel + (f * C + c) * 9;
        S* oc = out + (b * F + f) * H * W;
        for (std::size_t y = 0; y < H; ++y) {
          S* orow = oc + y * W;
          for (std::size_t i = 0; i < 3; ++i) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + i) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            const S* srow = xc + static_cast<std::size_t>(sy) * W;
            const S k0 = kfc[i * 3], k1 = kfc[i * 3 + 1], k2 = kfc[i * 3 + 2];
            orow[0] += k1 * srow[0] + k2 * srow[1];
            for (std::size_t u = 1; u + 1 < W; ++u)
              orow[u] += k0 * srow[u - 1] + k1 * srow[u] + k2 * srow[u + 1];
            orow[W - 1] += k0 * srow[W - 2] + k1 * srow[W - 1];
          }
        }
      }
    }
}

// Kernel gradient of conv3x3_acc: dk[f,c,i,j] += sum over b,y,x of
// gout[b,f,y,x] * x[b,c,y+i-1,x+j-1].
template <typename S>
void conv3x3_dk(const S* x, const S* gout, S* dk, std::size_t B, std::size_t C, std::size_t H,
                std::size_t W, std::size_t F) {
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < C; ++c) {
      S acc[9] = {};
      for (std::size_t b = 0; b < B; ++b) {
        const S* xc = x + (b * C + c) * H * W;
        const S* gc = gout + (b * F + f) * H * W;
        for (std::size_t y = 0; y < H; ++y) {
          const S* grow = gc + y * W;
          for (std::size_t i = 0; i < 3; ++i) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + i) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            const S* srow = xc + static_cast<std::size_t>(sy) * W;
            S a0 = 0, a1 = 0, a2 = 0;
            for (std::size_t u = 1; u < W; ++u) a0 += grow[u] * srow[u - 1];
            for (std::size_t u = 0; u < W; ++u) a1 += grow[u] * srow[u];
            for (std::size_t u = 0; u + 1 < W; ++u) a2 += grow[u] * srow[u + 1];
            acc[i * 3] += a0;
            acc[i * 3 + 1] += a1;
            acc[i * 3 + 2] += a2;
          }
        }
      }
      S* dst = dk + (f * C + c) * 9;
      for (std::size_t t = 0; t < 9; ++t) dst[t] += acc[t];
    }
}

}  // namespace detail

/// Records the operations of one forward pass and replays their backward
/// rules in reverse order. A tape and the tensors it produced form a
/// single-owner unit: build the graph, call backward once, apply updates,
/// discard. Construction order is the topological order.
template <typename S>
class Tape {
public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return steps_.size(); }

  /// Registers one backward step. Public so callers can define custom ops;
  /// the step must add into input .grad buffers via grad_accum().
  void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded step in reverse,
  /// populating grads of all requires_grad tensors reachable from the loss.
  void backward(const Tensor<S>& loss) {
    require(loss.numel() == 1, ErrCode::invalid_argument,
            "backward: loss must be scalar, got shape " + detail::shape_str(loss.shape()));
    require(recording_, ErrCode::invalid_argument, "backward: tape was not recording");
    loss.handle()->grad.assign(1, S(1));
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  // ---- elementwise -------------------------------------------------------

  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(
        a, b, "add", [](S x, S y) { return x + y; }, [](S, S, S) { return S(1); },
        [](S, S, S) { return S(1); });
  }

  Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(
        a, b, "sub", [](S x, S y) { return x - y; }, [](S, S, S) { return S(1); },
        [](S, S, S) { return S(-1); });
  }

  Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(
        a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y, S) { return y; },
        [](S x, S, S) { return x; });
  }

  Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(
        a, b, "div", [](S x, S y) { return x / y; }, [](S, S y, S) { return S(1) / y; },
        [](S x, S y, S) { return -x / (y * y); });
  }

  /// Elementwise max; at ties the gradient goes to the first operand.
  Tensor<S> max2(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(
        a, b, "max2", [](S x, S y) { return x >= y ? x : y; },
        [](S x, S y, S) { return x >= y ? S(1) : S(0); },
        [](S x, S y, S) { return y > x ? S(1) : S(0); });
  }

  Tensor<S> min2(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(
        a, b, "min2", [](S x, S y) { return x <= y ? x : y; },
        [](S x, S y, S) { return x <= y ? S(1) : S(0); },
        [](S x, S y, S) { return y < x ? S(1) : S(0); });
  }

  Tensor<S> neg(const Tensor<S>& x) {
    return unary_op(
        x, "neg", [](S v) { return -v; }, [](S, S) { return S(-1); });
  }

  // relu and leaky_relu avoid the generic elementwise path: a data-dependent
  // branch on ~50/50 random signs mispredicts constantly, so both are written
  // as branchless selects that compile to SIMD blends.
  Tensor<S> relu(const Tensor<S>& x) { return leaky_impl(x, S(0), "relu"); }

  Tensor<S> leaky_relu(const Tensor<S>& x, double slope) {
    return leaky_impl(x, static_cast<S>(slope), "leaky_relu");
  }

  Tensor<S> tanh(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const std::size_t n = x.numel();
    detail::array_tanh(x.data(), out.data(), n);
    detail::check_finite(out.values(), "tanh");
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, n] {
        if (od->grad.empty()) return;
        using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
        const Eigen::Index en = static_cast<Eigen::Index>(n);
        Eigen::Map<const Arr> g(od->grad.data(), en), y(od->values.data(), en);
        Eigen::Map<Arr> gx(grad_of(xd).data(), en);
        gx += g * (S(1) - y.square());
      });
    }
    return out;
  }

  Tensor<S> sigmoid(const Tensor<S>& x) {
    return unary_op(
        x, "sigmoid", [](S v) { return S(1) / (S(1) + std::exp(-v)); },
        [](S, S y) { return y * (S(1) - y); });
  }

  Tensor<S> square(const Tensor<S>& x) {
    return unary_op(
        x, "square", [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
  }

  Tensor<S> sqrt(const Tensor<S>& x) {
    return unary_op(
        x, "sqrt", [](S v) { return std::sqrt(v); }, [](S, S y) { return S(0.5) / y; });
  }

  /// log(1 + exp(x)) in the overflow-safe form max(x,0) + log1p(exp(-|x|)).
  Tensor<S> softplus(const Tensor<S>& x) {
    return unary_op(
        x, "softplus",
        [](S v) { return std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v))); },
        [](S v, S) { return S(1) / (S(1) + std::exp(-v)); });
  }

  /// max(x, c); the subgradient at x == c is 0.
  Tensor<S> max_with_scalar(const Tensor<S>& x, double c) {
    const S cc = static_cast<S>(c);
    return unary_op(
        x, "max_with_scalar", [cc](S v) { return v > cc ? v : cc; },
        [cc](S v, S) { return v > cc ? S(1) : S(0); });
  }

  Tensor<S> scale(const Tensor<S>& x, double c) {
    const S cc = static_cast<S>(c);
    return unary_op(
        x, "scale", [cc](S v) { return cc * v; }, [cc](S, S) { return cc; });
  }

  Tensor<S> add_scalar(const Tensor<S>& x, double c) {
    const S cc = static_cast<S>(c);
    return unary_op(
        x, "add_scalar", [cc](S v) { return v + cc; }, [](S, S) { return S(1); });
  }

  // ---- structure ---------------------------------------------------------

  Tensor<S> reshape(const Tensor<S>& x, std::vector<std::size_t> new_shape) {
    require(detail::shape_numel(new_shape) == x.numel(), ErrCode::shape_mismatch,
            "reshape: cannot view " + detail::shape_str(x.shape()) + " as " +
                detail::shape_str(new_shape));
    Tensor<S> out = Tensor<S>::from(std::move(new_shape), x.values());
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += od->grad[i];
      });
    }
    return out;
  }

  /// Rows [begin, begin+count) along axis 0.
  Tensor<S> slice_rows(const Tensor<S>& x, std::size_t begin, std::size_t count) {
    require(x.rank() >= 1, ErrCode::shape_mismatch, "slice_rows: rank-0 input");
    require(begin + count <= x.dim(0), ErrCode::invalid_argument,
            "slice_rows: range out of bounds");
    const std::size_t row = x.numel() / x.dim(0);
    std::vector<std::size_t> shape = x.shape();
    shape[0] = count;
    Tensor<S> out = Tensor<S>::zeros(std::move(shape));
    std::copy_n(x.data() + begin * row, count * row, out.data());
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, begin, row, count] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        for (std::size_t i = 0; i < count * row; ++i) gx[begin * row + i] += od->grad[i];
      });
    }
    return out;
  }

  /// Columns [begin, begin+count) of a 2-D tensor.
  Tensor<S> slice_cols(const Tensor<S>& x, std::size_t begin, std::size_t count) {
    require(x.rank() == 2, ErrCode::shape_mismatch, "slice_cols: expects a 2-D tensor");
    const std::size_t m = x.dim(0), n = x.dim(1);
    require(begin + count <= n, ErrCode::invalid_argument, "slice_cols: range out of bounds");
    Tensor<S> out = Tensor<S>::zeros({m, count});
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(x.data() + i * n + begin, count, out.data() + i * count);
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, begin, m, n, count] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += od->grad[i * count + j];
      });
    }
    return out;
  }

  /// out[r] = x[idx[r]] along axis 0; rows may repeat.
  Tensor<S> gather_rows(const Tensor<S>& x, std::vector<std::size_t> idx) {
    require(x.rank() >= 1, ErrCode::shape_mismatch, "gather_rows: rank-0 input");
    const std::size_t rows = x.dim(0);
    for (std::size_t r : idx)
      require(r < rows, ErrCode::invalid_argument,
              "gather_rows: index " + std::to_string(r) + " out of bounds for " +
                  std::to_string(rows) + " rows");
    const std::size_t row = x.numel() / rows;
    std::vector<std::size_t> shape = x.shape();
    shape[0] = idx.size();
    Tensor<S> out = Tensor<S>::zeros(std::move(shape));
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(x.data() + idx[r] * row, row, out.data() + r * row);
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, row, idx = std::move(idx)] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const S* g = od->grad.data() + r * row;
          S* dst = gx.data() + idx[r] * row;
          for (std::size_t i = 0; i < row; ++i) dst[i] += g[i];
        }
      });
    }
    return out;
  }

  // ---- linear algebra ----------------------------------------------------

  Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.rank() == 2 && b.rank() == 2, ErrCode::shape_mismatch,
            "matmul: expects 2-D operands");
    require(a.dim(1) == b.dim(0), ErrCode::shape_mismatch,
            "matmul: inner extents disagree: " + detail::shape_str(a.shape()) + " x " +
                detail::shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::gemm(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out.values(), "matmul");
    if (recording_ && (a.requires_grad() || b.requires_grad())) {
      out.set_requires_grad(true);
      auto ad = a.handle(), bd = b.handle(), od = out.handle();
      record([ad, bd, od, m, k, n] {
        if (od->grad.empty()) return;
        const S* g = od->grad.data();
        if (ad->requires_grad) detail::gemm_nt_acc(g, bd->values.data(), grad_of(ad).data(), m, n, k);
        if (bd->requires_grad) detail::gemm_tn_acc(ad->values.data(), g, grad_of(bd).data(), k, m, n);
      });
    }
    return out;
  }

  /// a[M,K] * b[N,K]^T; the natural layout for weight matrices stored
  /// as [out_features, in_features].
  Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.rank() == 2 && b.rank() == 2, ErrCode::shape_mismatch,
            "matmul_nt: expects 2-D operands");
    require(a.dim(1) == b.dim(1), ErrCode::shape_mismatch,
            "matmul_nt: inner extents disagree: " + detail::shape_str(a.shape()) + " x " +
                detail::shape_str(b.shape()) + "^T");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::gemm_nt(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out.values(), "matmul_nt");
    if (recording_ && (a.requires_grad() || b.requires_grad())) {
      out.set_requires_grad(true);
      auto ad = a.handle(), bd = b.handle(), od = out.handle();
      record([ad, bd, od, m, k, n] {
        if (od->grad.empty()) return;
        const S* g = od->grad.data();
        if (ad->requires_grad) detail::gemm_acc(g, bd->values.data(), grad_of(ad).data(), m, n, k);
        if (bd->requires_grad) detail::gemm_tn_acc(g, ad->values.data(), grad_of(bd).data(), n, m, k);
      });
    }
    return out;
  }

  /// m[M,N] + v[N], broadcast over rows.
  Tensor<S> add_rowvec(const Tensor<S>& m, const Tensor<S>& v) {
    require(m.rank() == 2 && v.rank() == 1 && v.dim(0) == m.dim(1), ErrCode::shape_mismatch,
            "add_rowvec: " + detail::shape_str(m.shape()) + " + " + detail::shape_str(v.shape()));
    const std::size_t rows = m.dim(0), n = m.dim(1);
    Tensor<S> out = Tensor<S>::zeros(m.shape());
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = m.data()[i * n + j] + v.data()[j];
    detail::check_finite(out.values(), "add_rowvec");
    if (recording_ && (m.requires_grad() || v.requires_grad())) {
      out.set_requires_grad(true);
      auto md = m.handle(), vd = v.handle(), od = out.handle();
      record([md, vd, od, rows, n] {
        if (od->grad.empty()) return;
        const S* g = od->grad.data();
        if (md->requires_grad) {
          auto& gm = grad_of(md);
          for (std::size_t i = 0; i < rows * n; ++i) gm[i] += g[i];
        }
        if (vd->requires_grad) {
          auto& gv = grad_of(vd);
          for (std::size_t j = 0; j < n; ++j) {
            S s = 0;
            for (std::size_t i = 0; i < rows; ++i) s += g[i * n + j];
            gv[j] += s;
          }
        }
      });
    }
    return out;
  }

  /// x[B,C,...] + bias[C], broadcast over batch and trailing axes.
  Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias) {
    require(x.rank() >= 2, ErrCode::shape_mismatch, "add_channel_bias: input rank must be >= 2");
    const std::size_t b = x.dim(0), c = x.dim(1), inner = x.numel() / (b * c);
    require(bias.rank() == 1 && bias.dim(0) == c, ErrCode::shape_mismatch,
            "add_channel_bias: bias shape " + detail::shape_str(bias.shape()) + " for " +
                std::to_string(c) + " channels");
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const Eigen::Index in = static_cast<Eigen::Index>(inner);
    for (std::size_t ib = 0; ib < b; ++ib)
      for (std::size_t ic = 0; ic < c; ++ic) {
        Eigen::Map<const Arr> src(x.data() + (ib * c + ic) * inner, in);
        Eigen::Map<Arr> dst(out.data() + (ib * c + ic) * inner, in);
        dst = src + bias.data()[ic];
      }
    detail::check_finite(out.values(), "add_channel_bias");
    if (recording_ && (x.requires_grad() || bias.requires_grad())) {
      out.set_requires_grad(true);
      auto xd = x.handle(), bd = bias.handle(), od = out.handle();
      record([xd, bd, od, b, c, inner, in] {
        if (od->grad.empty()) return;
        const S* g = od->grad.data();
        if (xd->requires_grad) {
          auto& gx = grad_of(xd);
          const Eigen::Index n = static_cast<Eigen::Index>(gx.size());
          Eigen::Map<Arr>(gx.data(), n) += Eigen::Map<const Arr>(g, n);
        }
        if (bd->requires_grad) {
          auto& gb = grad_of(bd);
          for (std::size_t ic = 0; ic < c; ++ic) {
            S s = 0;
            for (std::size_t ib = 0; ib < b; ++ib)
              s += Eigen::Map<const Arr>(g + (ib * c + ic) * inner, in).sum();
            gb[ic] += s;
          }
        }
      });
    }
    return out;
  }

  // ---- convolutions ------------------------------------------------------

  /// Cross-correlation of x[B,C,H,W] with kernel[F,C,k,k].
  Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, std::size_t stride,
                   std::size_t pad) {
    require(x.rank() == 4 && kernel.rank() == 4, ErrCode::shape_mismatch,
            "conv2d: expects 4-D input and kernel");
    require(kernel.dim(2) == kernel.dim(3), ErrCode::shape_mismatch,
            "conv2d: kernel must be square");
    require(kernel.dim(1) == x.dim(1), ErrCode::shape_mismatch,
            "conv2d: channel mismatch: input " + detail::shape_str(x.shape()) + ", kernel " +
                detail::shape_str(kernel.shape()));
    require(stride >= 1, ErrCode::invalid_argument, "conv2d: stride must be >= 1");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t F = kernel.dim(0), k = kernel.dim(2);
    const auto out_extent = [&](std::size_t e) {
      require(e + 2 * pad >= k, ErrCode::shape_mismatch, "conv2d: kernel larger than padded input");
      const std::size_t span = e + 2 * pad - k;
      require(span % stride == 0, ErrCode::shape_mismatch,
              "conv2d: non-integral output extent for input " + std::to_string(e));
      return span / stride + 1;
    };
    const std::size_t OH = out_extent(H), OW = out_extent(W);
    const std::size_t ckk = C * k * k, cols_w = B * OH * OW;
    const bool direct3 = k == 3 && stride == 1 && pad == 1 && F <= 4 && H >= 2 && W >= 2;

    Tensor<S> out = Tensor<S>::zeros({B, F, OH, OW});
    if (direct3) {
      detail::conv3x3_acc(x.data(), kernel.data(), out.data(), B, C, H, W, F);
    } else {
      detail::Scratch<S> cols(ckk * cols_w), outm(F * cols_w);
      detail::im2col(x.data(), B, C, H, W, k, stride, pad, OH, OW, cols.data());
      detail::gemm(kernel.data(), cols.data(), outm.data(), F, ckk, cols_w);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t f = 0; f < F; ++f)
          std::copy_n(outm.data() + f * cols_w + b * OH * OW, OH * OW,
                      out.data() + (b * F + f) * OH * OW);
    }
    detail::check_finite(out.values(), "conv2d");

    if (recording_ && (x.requires_grad() || kernel.requires_grad())) {
      out.set_requires_grad(true);
      const bool need_dx = x.requires_grad(), need_dk = kernel.requires_grad();
      auto xd = x.handle(), kd = kernel.handle(), od = out.handle();
      if (direct3) {
        record([xd, kd, od, need_dx, need_dk, B, C, H, W, F] {
          if (od->grad.empty()) return;
          if (need_dk)
            detail::conv3x3_dk(xd->values.data(), od->grad.data(), grad_of(kd).data(), B, C, H, W,
                               F);
          if (need_dx) {
            // The input gradient is the same correlation run backwards: flip
            // each 3x3 filter and swap the filter/channel axes.
            std::vector<S> kt(C * F * 9);
            for (std::size_t f = 0; f < F; ++f)
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < 9; ++t)
                  kt[(c * F + f) * 9 + t] = kd->values[(f * C + c) * 9 + (8 - t)];
            detail::conv3x3_acc(od->grad.data(), kt.data(), grad_of(xd).data(), B, F, H, W, C);
          }
        });
      } else {
        record([xd, kd, od, need_dx, need_dk, B, C, H, W, F, k, stride, pad, OH, OW, ckk,
                cols_w] {
          if (od->grad.empty()) return;
          detail::Scratch<S> goutm(F * cols_w);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f)
              std::copy_n(od->grad.data() + (b * F + f) * OH * OW, OH * OW,
                          goutm.data() + f * cols_w + b * OH * OW);
          if (need_dk) {
            // Rebuilding the patch matrix costs one im2col but spares holding
            // a k^2-times-input-sized buffer alive from forward until now.
            detail::Scratch<S> cols(ckk * cols_w);
            detail::im2col(xd->values.data(), B, C, H, W, k, stride, pad, OH, OW, cols.data());
            detail::gemm_nt_acc(goutm.data(), cols.data(), grad_of(kd).data(), F, cols_w, ckk);
          }
          if (need_dx) {
            detail::Scratch<S> gcols(ckk * cols_w);
            detail::gemm_tn(kd->values.data(), goutm.data(), gcols.data(), ckk, F, cols_w);
            detail::col2im_add(gcols.data(), B, C, H, W, k, stride, pad, OH, OW,
                               grad_of(xd).data());
          }
        });
      }
    }
    return out;
  }

  /// Transposed convolution of x[B,C,H,W] with kernel[C,F,k,k];
  /// output extent (H-1)*stride - 2*pad + k. Forward is the adjoint of
  /// conv2d's forward on the same geometry.
  Tensor<S> conv2d_transpose(const Tensor<S>& x, const Tensor<S>& kernel, std::size_t stride,
                             std::size_t pad) {
    require(x.rank() == 4 && kernel.rank() == 4, ErrCode::shape_mismatch,
            "conv2d_transpose: expects 4-D input and kernel");
    require(kernel.dim(2) == kernel.dim(3), ErrCode::shape_mismatch,
            "conv2d_transpose: kernel must be square");
    require(kernel.dim(0) == x.dim(1), ErrCode::shape_mismatch,
            "conv2d_transpose: channel mismatch: input " + detail::shape_str(x.shape()) +
                ", kernel " + detail::shape_str(kernel.shape()));
    require(stride >= 1, ErrCode::invalid_argument, "conv2d_transpose: stride must be >= 1");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t F = kernel.dim(1), k = kernel.dim(2);
    const auto out_extent = [&](std::size_t e) {
      const std::ptrdiff_t o = static_cast<std::ptrdiff_t>((e - 1) * stride + k) -
                               static_cast<std::ptrdiff_t>(2 * pad);
      require(o >= 1, ErrCode::shape_mismatch, "conv2d_transpose: non-positive output extent");
      return static_cast<std::size_t>(o);
    };
    const std::size_t OH = out_extent(H), OW = out_extent(W);
    const std::size_t fkk = F * k * k, bhw = B * H * W;

    Tensor<S> out = Tensor<S>::zeros({B, F, OH, OW});
    {
      // Gather x into channel-major [C, B*H*W].
      detail::Scratch<S> xg(C * bhw), cols(fkk * bhw);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          std::copy_n(x.data() + (b * C + c) * H * W, H * W, xg.data() + c * bhw + b * H * W);
      detail::gemm_tn(kernel.data(), xg.data(), cols.data(), fkk, C, bhw);
      detail::col2im_add(cols.data(), B, F, OH, OW, k, stride, pad, H, W, out.data());
    }
    detail::check_finite(out.values(), "conv2d_transpose");

    if (recording_ && (x.requires_grad() || kernel.requires_grad())) {
      out.set_requires_grad(true);
      const bool need_dx = x.requires_grad(), need_dk = kernel.requires_grad();
      auto xd = x.handle(), kd = kernel.handle(), od = out.handle();
      record([xd, kd, od, need_dx, need_dk, B, C, H, W, F, k, stride, pad, OH, OW, fkk, bhw] {
        if (od->grad.empty()) return;
        detail::Scratch<S> gcols(fkk * bhw);
        detail::im2col(od->grad.data(), B, F, OH, OW, k, stride, pad, H, W, gcols.data());
        if (need_dk) {
          detail::Scratch<S> xg(C * bhw);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
              std::copy_n(xd->values.data() + (b * C + c) * H * W, H * W,
                          xg.data() + c * bhw + b * H * W);
          detail::gemm_nt_acc(xg.data(), gcols.data(), grad_of(kd).data(), C, bhw, fkk);
        }
        if (need_dx) {
          detail::Scratch<S> gxg(C * bhw);
          detail::gemm(kd->values.data(), gcols.data(), gxg.data(), C, fkk, bhw);
          auto& gx = grad_of(xd);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const S* src = gxg.data() + c * bhw + b * H * W;
              S* dst = gx.data() + (b * C + c) * H * W;
              for (std::size_t i = 0; i < H * W; ++i) dst[i] += src[i];
            }
        }
      });
    }
    return out;
  }

  // ---- normalization -----------------------------------------------------

  /// Normalizes x[B,C,...] per channel over batch and trailing axes (no
  /// affine). Train mode uses batch statistics and folds them into the
  /// running statistics; eval mode uses the running statistics.
  Tensor<S> channel_norm(const Tensor<S>& x, double eps, Mode mode, BatchNormState<S>& state) {
    require(x.rank() >= 2, ErrCode::shape_mismatch, "channel_norm: input rank must be >= 2");
    require(eps > 0, ErrCode::invalid_argument, "channel_norm: eps must be positive");
    const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
    require(state.running_mean.size() == C, ErrCode::shape_mismatch,
            "channel_norm: state not initialized for " + std::to_string(C) + " channels");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> invstd(C);

    if (mode == Mode::train) {
      require(B >= 2, ErrCode::invalid_argument,
              "channel_norm: train mode needs batch size >= 2");
      const std::size_t n = B * inner;
      for (std::size_t c = 0; c < C; ++c) {
        S sum = 0, sq = 0;
        for (std::size_t b = 0; b < B; ++b) {
          const S* p = x.data() + (b * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            sum += p[i];
            sq += p[i] * p[i];
          }
        }
        const S mean = sum / static_cast<S>(n);
        S var = sq / static_cast<S>(n) - mean * mean;
        if (var < S(0)) var = S(0);  // guard rounding
        invstd[c] = S(1) / std::sqrt(var + static_cast<S>(eps));
        for (std::size_t b = 0; b < B; ++b) {
          const S* p = x.data() + (b * C + c) * inner;
          S* q = out.data() + (b * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) q[i] = (p[i] - mean) * invstd[c];
        }
        const S mom = state.momentum;
        state.running_mean[c] = mom * state.running_mean[c] + (S(1) - mom) * mean;
        state.running_var[c] = mom * state.running_var[c] + (S(1) - mom) * var;
      }
    } else {
      for (std::size_t c = 0; c < C; ++c) {
        invstd[c] = S(1) / std::sqrt(state.running_var[c] + static_cast<S>(eps));
        const S mean = state.running_mean[c];
        for (std::size_t b = 0; b < B; ++b) {
          const S* p = x.data() + (b * C + c) * inner;
          S* q = out.data() + (b * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) q[i] = (p[i] - mean) * invstd[c];
        }
      }
    }
    detail::check_finite(out.values(), "channel_norm");

    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      const bool train = mode == Mode::train;
      record([xd, od, invstd = std::move(invstd), B, C, inner, train] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        const S* g = od->grad.data();
        const S* y = od->values.data();
        const std::size_t n = B * inner;
        for (std::size_t c = 0; c < C; ++c) {
          if (train) {
            S s1 = 0, s2 = 0;
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t base = (b * C + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                s1 += g[base + i];
                s2 += g[base + i] * y[base + i];
              }
            }
            const S m1 = s1 / static_cast<S>(n), m2 = s2 / static_cast<S>(n);
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t base = (b * C + c) * inner;
              for (std::size_t i = 0; i < inner; ++i)
                gx[base + i] += invstd[c] * (g[base + i] - m1 - y[base + i] * m2);
            }
          } else {
            for (std::size_t b = 0; b < B; ++b) {
              const std::size_t base = (b * C + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) gx[base + i] += g[base + i] * invstd[c];
            }
          }
        }
      });
    }
    return out;
  }

  /// x[B,C,...] * gamma + beta, with gamma/beta either per-channel [C] or
  /// per-sample-and-channel [B,C].
  Tensor<S> channel_affine(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta) {
    require(x.rank() >= 2, ErrCode::shape_mismatch, "channel_affine: input rank must be >= 2");
    const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
    const bool per_sample = gamma.rank() == 2;
    if (per_sample) {
      require(gamma.dim(0) == B && gamma.dim(1) == C, ErrCode::shape_mismatch,
              "channel_affine: gamma shape " + detail::shape_str(gamma.shape()));
    } else {
      require(gamma.rank() == 1 && gamma.dim(0) == C, ErrCode::shape_mismatch,
              "channel_affine: gamma shape " + detail::shape_str(gamma.shape()));
    }
    require(beta.shape() == gamma.shape(), ErrCode::shape_mismatch,
            "channel_affine: gamma/beta shapes disagree");

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t gi = per_sample ? b * C + c : c;
        const S gv = gamma.data()[gi], bv = beta.data()[gi];
        const S* p = x.data() + (b * C + c) * inner;
        S* q = out.data() + (b * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) q[i] = p[i] * gv + bv;
      }
    detail::check_finite(out.values(), "channel_affine");

    if (recording_ && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
      out.set_requires_grad(true);
      auto xd = x.handle(), gd = gamma.handle(), bd = beta.handle(), od = out.handle();
      record([xd, gd, bd, od, B, C, inner, per_sample] {
        if (od->grad.empty()) return;
        const S* g = od->grad.data();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t gi = per_sample ? b * C + c : c;
            const std::size_t base = (b * C + c) * inner;
            if (xd->requires_grad) {
              auto& gx = grad_of(xd);
              const S gv = gd->values[gi];
              for (std::size_t i = 0; i < inner; ++i) gx[base + i] += g[base + i] * gv;
            }
            if (gd->requires_grad) {
              S s = 0;
              for (std::size_t i = 0; i < inner; ++i) s += g[base + i] * xd->values[base + i];
              grad_of(gd)[gi] += s;
            }
            if (bd->requires_grad) {
              S s = 0;
              for (std::size_t i = 0; i < inner; ++i) s += g[base + i];
              grad_of(bd)[gi] += s;
            }
          }
      });
    }
    return out;
  }

  /// Batch normalization with per-channel affine parameters.
  Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       double eps, Mode mode, BatchNormState<S>& state) {
    return channel_affine(channel_norm(x, eps, mode, state), gamma, beta);
  }

  // ---- reductions --------------------------------------------------------

  Tensor<S> reduce_sum(const Tensor<S>& x, const std::vector<std::size_t>& axes) {
    return reduce(x, axes, false);
  }

  Tensor<S> reduce_mean(const Tensor<S>& x, const std::vector<std::size_t>& axes) {
    return reduce(x, axes, true);
  }

  Tensor<S> sum_all(const Tensor<S>& x) { return reduce(x, all_axes(x), false); }
  Tensor<S> mean_all(const Tensor<S>& x) { return reduce(x, all_axes(x), true); }

  /// Per-row maximum of a 2-D tensor; at ties the gradient goes to the
  /// lowest column index.
  Tensor<S> row_max(const Tensor<S>& x) { return row_extremum(x, "row_max", true); }

  Tensor<S> row_min(const Tensor<S>& x) { return row_extremum(x, "row_min", false); }

private:
  static std::vector<S>& grad_of(const std::shared_ptr<TensorData<S>>& d) {
    if (d->grad.empty()) d->grad.assign(d->values.size(), S(0));
    return d->grad;
  }

  // max(x,0) + slope*min(x,0) instead of a select: Eigen evaluates select
  // expressions scalar-by-scalar, while min/max/sign map straight to SIMD.
  Tensor<S> leaky_impl(const Tensor<S>& x, S slope, const char* name) {
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    const Eigen::Index n = static_cast<Eigen::Index>(x.numel());
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    Eigen::Map<const Arr> xm(x.data(), n);
    Eigen::Map<Arr> om(out.data(), n);
    om = xm.max(S(0)) + slope * xm.min(S(0));
    detail::check_finite(out.values(), name);
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, slope, n] {
        if (od->grad.empty()) return;
        Eigen::Map<const Arr> xv(xd->values.data(), n);
        Eigen::Map<const Arr> g(od->grad.data(), n);
        Eigen::Map<Arr> gx(grad_of(xd).data(), n);
        // sign(x).max(0) is 1 on x > 0 and 0 otherwise, so the slope wins
        // at exactly zero, as in the scalar definition.
        gx += g * (slope + (S(1) - slope) * xv.sign().max(S(0)));
      });
    }
    return out;
  }

  Tensor<S> row_extremum(const Tensor<S>& x, const char* name, bool take_max) {
    require(x.rank() == 2, ErrCode::shape_mismatch, std::string(name) + ": expects a 2-D tensor");
    const std::size_t m = x.dim(0), n = x.dim(1);
    require(n > 0, ErrCode::invalid_argument, std::string(name) + ": rows are empty");
    Tensor<S> out = Tensor<S>::zeros({m});
    std::vector<std::size_t> arg(m);
    for (std::size_t i = 0; i < m; ++i) {
      const S* row = x.data() + i * n;
      S best = row[0];
      std::size_t at = 0;
      for (std::size_t j = 1; j < n; ++j) {
        const bool better = take_max ? row[j] > best : row[j] < best;
        if (better) {
          best = row[j];
          at = j;
        }
      }
      out.data()[i] = best;
      arg[i] = at;
    }
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, m, n, arg = std::move(arg)] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        for (std::size_t i = 0; i < m; ++i) gx[i * n + arg[i]] += od->grad[i];
      });
    }
    return out;
  }

  static std::vector<std::size_t> all_axes(const Tensor<S>& x) {
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return axes;
  }

  Tensor<S> reduce(const Tensor<S>& x, const std::vector<std::size_t>& axes, bool mean) {
    std::set<std::size_t> ax(axes.begin(), axes.end());
    for (std::size_t a : ax)
      require(a < x.rank(), ErrCode::invalid_argument,
              "reduce: axis " + std::to_string(a) + " out of range for rank " +
                  std::to_string(x.rank()));
    const std::size_t rank = x.rank();
    std::vector<std::size_t> out_shape;
    for (std::size_t a = 0; a < rank; ++a)
      if (!ax.count(a)) out_shape.push_back(x.dim(a));
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const std::size_t count = x.numel() / std::max<std::size_t>(out.numel(), 1);

    // out_contrib[a]: stride of input axis a within the output (0 if reduced).
    std::vector<std::size_t> out_contrib(rank, 0);
    {
      std::size_t stride = 1;
      for (std::size_t a = rank; a-- > 0;) {
        if (!ax.count(a)) {
          out_contrib[a] = stride;
          stride *= x.dim(a);
        }
      }
    }
    // Captures by value: the backward closure outlives this frame.
    auto for_each = [ishape = x.shape(), out_contrib, rank,
                     n = x.numel()](auto&& body) {
      std::vector<std::size_t> idx(rank, 0);
      std::size_t oidx = 0;
      for (std::size_t lin = 0; lin < n; ++lin) {
        body(lin, oidx);
        for (std::size_t a = rank; a-- > 0;) {
          if (++idx[a] < ishape[a]) {
            oidx += out_contrib[a];
            break;
          }
          idx[a] = 0;
          oidx -= out_contrib[a] * (ishape[a] - 1);
        }
      }
    };

    for_each([&](std::size_t lin, std::size_t oidx) { out.data()[oidx] += x.data()[lin]; });
    if (mean)
      for (S& v : out.values()) v /= static_cast<S>(count);
    detail::check_finite(out.values(), mean ? "reduce_mean" : "reduce_sum");

    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      const S inv = mean ? S(1) / static_cast<S>(count) : S(1);
      record([xd, od, for_each, inv] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        const S* g = od->grad.data();
        for_each([&](std::size_t lin, std::size_t oidx) { gx[lin] += g[oidx] * inv; });
      });
    }
    return out;
  }

  template <typename Fwd, typename Der>
  Tensor<S> unary_op(const Tensor<S>& x, const char* name, Fwd fwd, Der der) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(x.data()[i]);
    detail::check_finite(out.values(), name);
    if (recording_ && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xd = x.handle(), od = out.handle();
      record([xd, od, der, n] {
        if (od->grad.empty()) return;
        auto& gx = grad_of(xd);
        for (std::size_t i = 0; i < n; ++i)
          gx[i] += od->grad[i] * der(xd->values[i], od->values[i]);
      });
    }
    return out;
  }

  // Binary elementwise op; shapes must match, or either side may be a
  // one-element tensor broadcast against the other. The scalar side's
  // gradient is the sum over broadcast positions.
  template <typename Fwd, typename DA, typename DB>
  Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name, Fwd fwd, DA da,
                      DB db) {
    const bool sa = a.numel() == 1, sb = b.numel() == 1;
    require(sa || sb || a.shape() == b.shape(), ErrCode::shape_mismatch,
            std::string(name) + ": shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                detail::shape_str(b.shape()));
    const Tensor<S>& shaped = (sa && !sb) ? b : a;
    Tensor<S> out = Tensor<S>::zeros(shaped.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(pa[sa ? 0 : i], pb[sb ? 0 : i]);
    detail::check_finite(out.values(), name);
    if (recording_ && (a.requires_grad() || b.requires_grad())) {
      out.set_requires_grad(true);
      auto ad = a.handle(), bd = b.handle(), od = out.handle();
      record([ad, bd, od, da, db, n, sa, sb] {
        if (od->grad.empty()) return;
        const S* g = od->grad.data();
        const S* va = ad->values.data();
        const S* vb = bd->values.data();
        const S* vo = od->values.data();
        if (ad->requires_grad) {
          auto& ga = grad_of(ad);
          for (std::size_t i = 0; i < n; ++i)
            ga[sa ? 0 : i] += g[i] * da(va[sa ? 0 : i], vb[sb ? 0 : i], vo[i]);
        }
        if (bd->requires_grad) {
          auto& gb = grad_of(bd);
          for (std::size_t i = 0; i < n; ++i)
            gb[sb ? 0 : i] += g[i] * db(va[sa ? 0 : i], vb[sb ? 0 : i], vo[i]);
        }
      });
    }
    return out;
  }

  std::vector<std::function<void()>> steps_;
  bool recording_;
};

/// Max over all parameter elements of |analytic - central difference| /
/// max(1, |central difference|). `f` must be deterministic: it is re-run
/// with perturbed parameter values, so it must not consume external
/// randomness or mutate persistent state that feeds back into its value.
/// Meaningful only at 64-bit precision.
template <typename S>
double grad_check(const std::function<Tensor<S>(Tape<S>&)>& f, std::vector<Tensor<S>> params,
                  double h = 1e-5) {
  require(h > 0, ErrCode::invalid_argument, "grad_check: h must be positive");
  for (auto& p : params) {
    require(p.requires_grad(), ErrCode::invalid_argument,
            "grad_check: every parameter must require gradients");
    p.zero_grad();
  }
  std::vector<std::vector<S>> analytic;
  {
    Tape<S> tape(true);
    Tensor<S> loss = f(tape);
    require(loss.numel() == 1, ErrCode::invalid_argument, "grad_check: f must return a scalar");
    tape.backward(loss);
    for (auto& p : params)
      analytic.push_back(p.grad_present() ? p.grad() : std::vector<S>(p.numel(), S(0)));
  }
  auto eval = [&]() {
    Tape<S> tape(false);
    return static_cast<double>(f(tape).item());
  };
  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const S v0 = p.data()[i];
      p.data()[i] = v0 + static_cast<S>(h);
      const double fp = eval();
      p.data()[i] = v0 - static_cast<S>(h);
      const double fm = eval();
      p.data()[i] = v0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err =
          std::abs(static_cast<double>(analytic[pi][i]) - numeric) / std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace ssgan
