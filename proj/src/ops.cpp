#include "cainn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cainn {

namespace {

void require_same_batch_spatial(const Shape& a, const Shape& b, const char* what) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw ShapeError(std::string(what) + ": batch/spatial extents differ, " + a.str() + " vs " + b.str());
  }
}

template <typename T>
void check_conv_shapes(const Shape& in, const Shape& weight) {
  if (weight.h != weight.w || weight.h % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + weight.str());
  }
  if (in.c != weight.c) {
    throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels but kernel expects " +
                     std::to_string(weight.c));
  }
}

// Valid output columns [lo, hi) for kernel column kw with padding pad.
inline void column_range(std::size_t kw, std::size_t pad, std::size_t width, std::size_t& lo,
                         std::size_t& hi) {
  lo = kw < pad ? pad - kw : 0;
  hi = kw > pad ? (width > kw - pad ? width - (kw - pad) : 0) : width;
}

}  // namespace

Broadcast broadcast_kind(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::None;
  if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return Broadcast::Channel;
  if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return Broadcast::Spatial;
  throw ShapeError("elementwise: cannot broadcast " + b.str() + " onto " + a.str());
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  check_conv_shapes<T>(is, ws);
  if (bias != nullptr && bias->numel() != ws.n) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias->numel()) + " entries for " +
                     std::to_string(ws.n) + " output channels");
  }
  const std::size_t k = ws.h;
  const std::size_t pad = (k - 1) / 2;
  const std::size_t H = is.h;
  const std::size_t W = is.w;
  Tensor<T> out(Shape{is.n, ws.n, H, W});
  for (std::size_t n = 0; n < is.n; ++n) {
    for (std::size_t co = 0; co < ws.n; ++co) {
      T* dst = out.plane(n, co);
      const T b = bias != nullptr ? (*bias)[co] : T(0);
      std::fill(dst, dst + H * W, b);
      for (std::size_t ci = 0; ci < ws.c; ++ci) {
        const T* src = input.plane(n, ci);
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wv = weight.at(co, ci, kh, kw);
            if (wv == T(0)) continue;
            std::size_t lo, hi;
            column_range(kw, pad, W, lo, hi);
            for (std::size_t oh = 0; oh < H; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - static_cast<std::ptrdiff_t>(pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* row = src + static_cast<std::size_t>(ih) * W;
              T* drow = dst + oh * W;
              for (std::size_t ow = lo; ow < hi; ++ow) drow[ow] += wv * row[ow + kw - pad];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight, const Shape& input_shape) {
  const Shape& ws = weight.shape();
  const std::size_t k = ws.h;
  const std::size_t pad = (k - 1) / 2;
  const std::size_t H = input_shape.h;
  const std::size_t W = input_shape.w;
  Tensor<T> grad(input_shape);
  for (std::size_t n = 0; n < input_shape.n; ++n) {
    for (std::size_t co = 0; co < ws.n; ++co) {
      const T* g = grad_out.plane(n, co);
      for (std::size_t ci = 0; ci < ws.c; ++ci) {
        T* dst = grad.plane(n, ci);
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wv = weight.at(co, ci, kh, kw);
            if (wv == T(0)) continue;
            std::size_t lo, hi;
            column_range(kw, pad, W, lo, hi);
            for (std::size_t oh = 0; oh < H; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - static_cast<std::ptrdiff_t>(pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              T* row = dst + static_cast<std::size_t>(ih) * W;
              const T* grow = g + oh * W;
              for (std::size_t ow = lo; ow < hi; ++ow) row[ow + kw - pad] += wv * grow[ow];
            }
          }
        }
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& input, const Shape& weight_shape) {
  const Shape& is = input.shape();
  const std::size_t k = weight_shape.h;
  const std::size_t pad = (k - 1) / 2;
  const std::size_t H = is.h;
  const std::size_t W = is.w;
  Tensor<T> grad(weight_shape);
  for (std::size_t co = 0; co < weight_shape.n; ++co) {
    for (std::size_t ci = 0; ci < weight_shape.c; ++ci) {
      for (std::size_t kh = 0; kh < k; ++kh) {
        for (std::size_t kw = 0; kw < k; ++kw) {
          std::size_t lo, hi;
          column_range(kw, pad, W, lo, hi);
          T acc = 0;
          for (std::size_t n = 0; n < is.n; ++n) {
            const T* g = grad_out.plane(n, co);
            const T* src = input.plane(n, ci);
            for (std::size_t oh = 0; oh < H; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - static_cast<std::ptrdiff_t>(pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* row = src + static_cast<std::size_t>(ih) * W;
              const T* grow = g + oh * W;
              for (std::size_t ow = lo; ow < hi; ++ow) acc += grow[ow] * row[ow + kw - pad];
            }
          }
          grad.at(co, ci, kh, kw) = acc;
        }
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> conv2d_grad_bias(const Tensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  Tensor<T> grad(Shape{1, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* g = grad_out.plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += g[i];
      grad[c] += acc;
    }
  }
  return grad;
}

template <typename T>
Tensor<T> global_pool(const Tensor<T>& input, PoolMode mode) {
  const Shape& s = input.shape();
  if (s.plane() == 0) throw ShapeError("global_pool: empty spatial extent " + s.str());
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      if (mode == PoolMode::Avg) {
        T acc = 0;
        for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
        out.at(n, c, 0, 0) = acc / static_cast<T>(s.plane());
      } else {
        out.at(n, c, 0, 0) = *std::max_element(p, p + s.plane());
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> channelwise_pool(const Tensor<T>& input, PoolMode mode) {
  const Shape& s = input.shape();
  if (s.c == 0) throw ShapeError("channelwise_pool: no channels in " + s.str());
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    T* dst = out.plane(n, 0);
    std::copy(input.plane(n, 0), input.plane(n, 0) + s.plane(), dst);
    for (std::size_t c = 1; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      if (mode == PoolMode::Avg) {
        for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += p[i];
      } else {
        for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = std::max(dst[i], p[i]);
      }
    }
    if (mode == PoolMode::Avg && s.c > 1) {
      const T inv = T(1) / static_cast<T>(s.c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] *= inv;
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require_same_batch_spatial(sa, sb, "concat_channels");
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t plane = sa.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy(a.plane(n, 0), a.plane(n, 0) + sa.c * plane, out.plane(n, 0));
    std::copy(b.plane(n, 0), b.plane(n, 0) + sb.c * plane, out.plane(n, sa.c));
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  const Shape& s = input.shape();
  if (begin + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") exceeds " + std::to_string(s.c) + " channels");
  }
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    if (count == 0) continue;
    std::copy(input.plane(n, begin), input.plane(n, begin) + count * s.plane(), out.plane(n, 0));
  }
  return out;
}

template <typename T>
Tensor<T> map_unary(const Tensor<T>& input, UnaryOp op) {
  Tensor<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  switch (op) {
    case UnaryOp::Exp:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::exp(src[i]);
      break;
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::tanh(src[i]);
      break;
    case UnaryOp::Relu:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
      break;
    case UnaryOp::Sigmoid:
      // Branching keeps exp() from overflowing for large |x|.
      for (std::size_t i = 0; i < src.size(); ++i) {
        const T x = src[i];
        if (x >= T(0)) {
          dst[i] = T(1) / (T(1) + std::exp(-x));
        } else {
          const T e = std::exp(x);
          dst[i] = e / (T(1) + e);
        }
      }
      break;
  }
  return out;
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op) {
  const Broadcast kind = broadcast_kind(a.shape(), b.shape());
  const Shape& s = a.shape();
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* pa = a.plane(n, c);
      T* dst = out.plane(n, c);
      if (kind == Broadcast::Channel) {
        const T bv = b.at(n, c, 0, 0);
        if (op == BinaryOp::Add) {
          for (std::size_t i = 0; i < plane; ++i) dst[i] = pa[i] + bv;
        } else {
          for (std::size_t i = 0; i < plane; ++i) dst[i] = pa[i] * bv;
        }
      } else {
        const T* pb = kind == Broadcast::None ? b.plane(n, c) : b.plane(n, 0);
        if (op == BinaryOp::Add) {
          for (std::size_t i = 0; i < plane; ++i) dst[i] = pa[i] + pb[i];
        } else {
          for (std::size_t i = 0; i < plane; ++i) dst[i] = pa[i] * pb[i];
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] * factor;
  return out;
}

void check_permutation(std::span<const std::size_t> perm, std::size_t channels) {
  if (perm.size() != channels) {
    throw ContractError("permutation has " + std::to_string(perm.size()) + " entries for " +
                        std::to_string(channels) + " channels");
  }
  std::vector<bool> seen(channels, false);
  for (std::size_t p : perm) {
    if (p >= channels || seen[p]) throw ContractError("channel permutation is not a bijection");
    seen[p] = true;
  }
}

std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm) {
  check_permutation(perm, perm.size());
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

template <typename T>
Tensor<T> permute_channels(const Tensor<T>& input, std::span<const std::size_t> perm) {
  const Shape& s = input.shape();
  check_permutation(perm, s.c);
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      std::copy(input.plane(n, perm[c]), input.plane(n, perm[c]) + s.plane(), out.plane(n, c));
    }
  }
  return out;
}

template <typename T>
Tensor<T> unpermute_channels(const Tensor<T>& input, std::span<const std::size_t> perm) {
  const auto inv = invert_permutation(perm);
  return permute_channels(input, std::span<const std::size_t>(inv));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  T worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

#define CAINN_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);          \
  template Tensor<T> conv2d_grad_input<T>(const Tensor<T>&, const Tensor<T>&, const Shape&);   \
  template Tensor<T> conv2d_grad_weight<T>(const Tensor<T>&, const Tensor<T>&, const Shape&);  \
  template Tensor<T> conv2d_grad_bias<T>(const Tensor<T>&);                                    \
  template Tensor<T> global_pool<T>(const Tensor<T>&, PoolMode);                               \
  template Tensor<T> channelwise_pool<T>(const Tensor<T>&, PoolMode);                          \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::size_t, std::size_t);            \
  template Tensor<T> map_unary<T>(const Tensor<T>&, UnaryOp);                                  \
  template Tensor<T> elementwise<T>(const Tensor<T>&, const Tensor<T>&, BinaryOp);             \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> permute_channels<T>(const Tensor<T>&, std::span<const std::size_t>);      \
  template Tensor<T> unpermute_channels<T>(const Tensor<T>&, std::span<const std::size_t>);    \
  template bool all_finite<T>(const Tensor<T>&);                                               \
  template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);

CAINN_INSTANTIATE_OPS(float)
CAINN_INSTANTIATE_OPS(double)

#undef CAINN_INSTANTIATE_OPS

}  // namespace cainn
