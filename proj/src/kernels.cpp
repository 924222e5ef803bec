#include "flopsgate/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace flopsgate::kernels {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
ConstMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMap<T>(t.data(), static_cast<Eigen::Index>(t.dim(0)),
                     static_cast<Eigen::Index>(t.dim(1)));
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(s));
  }
}

// Number of elements per (n, c) slice of a rank>=2 tensor.
std::size_t inner_extent(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return inner;
}

}  // namespace

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t total_padding,
                               std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("convolution stride must be >= 1");
  if (kernel == 0 || kernel > input + total_padding) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(input + total_padding));
  }
  return (input + total_padding - kernel) / stride + 1;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  MutMap<T>(out.data(), a.dim(0), b.dim(1)).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> matmul_at_b(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_at_b lhs");
  require_rank(b.shape(), 2, "matmul_at_b rhs");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_at_b: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(1), b.dim(1)});
  MutMap<T>(out.data(), a.dim(1), b.dim(1)).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> matmul_a_bt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_a_bt lhs");
  require_rank(b.shape(), 2, "matmul_a_bt rhs");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_a_bt: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(0)});
  MutMap<T>(out.data(), a.dim(0), b.dim(0)).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return out;
}

namespace {

// Output columns [lo, hi) whose input column ox * stride + kj - pad lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_span(std::size_t ow, std::size_t w, std::size_t kj,
                                               std::ptrdiff_t pad, std::size_t stride) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const auto off = static_cast<std::ptrdiff_t>(kj) - pad;
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(w) - off <= 0 ? 0 : (static_cast<std::ptrdiff_t>(w) - off + s - 1) / s;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, ConvParams p) {
  require_rank(x.shape(), 4, "im2col input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = conv_output_extent(h, kh, 2 * p.padding, p.stride);
  const std::size_t ow = conv_output_extent(w, kw, 2 * p.padding, p.stride);
  const std::size_t ncols = n * oh * ow;
  Tensor<T> cols({c * kh * kw, ncols});
  T* out = cols.data();
  const T* in = x.data();
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = out + ((ch * kh + ki) * kw + kj) * ncols;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = in + (b * c + ch) * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ki) - pad;
            T* dst = row + (b * oh + oy) * ow;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
              std::fill(dst, dst + ow, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * w;
            const auto [lo, hi] = valid_span(ow, w, kj, pad, p.stride);
            std::fill(dst, dst + lo, T(0));
            if (p.stride == 1) {
              std::copy(src + (lo + kj - p.padding), src + (hi + kj - p.padding), dst + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * p.stride + kj - p.padding];
            }
            std::fill(dst + hi, dst + ow, T(0));
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& input_shape, std::size_t kh, std::size_t kw,
                 ConvParams p) {
  require_rank(input_shape, 4, "col2im input");
  const std::size_t n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t oh = conv_output_extent(h, kh, 2 * p.padding, p.stride);
  const std::size_t ow = conv_output_extent(w, kw, 2 * p.padding, p.stride);
  const std::size_t ncols = n * oh * ow;
  require_same_shape(cols.shape(), Shape{c * kh * kw, ncols}, "col2im columns");
  Tensor<T> x(input_shape);
  T* out = x.data();
  const T* in = cols.data();
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = in + ((ch * kh + ki) * kw + kj) * ncols;
        for (std::size_t b = 0; b < n; ++b) {
          T* plane = out + (b * c + ch) * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ki) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const T* src = row + (b * oh + oy) * ow;
            T* dst = plane + static_cast<std::size_t>(iy) * w;
            const auto [lo, hi] = valid_span(ow, w, kj, pad, p.stride);
            if (p.stride == 1) {
              const std::size_t shift = kj - p.padding;  // wraps when negative; ox + shift stays in range
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * p.stride + kj - p.padding] += src[ox];
            }
          }
        }
      }
    }
  }
  return x;
}

template <typename T>
ConvForward<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, ConvParams p) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d kernel");
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: channel mismatch input " + shape_string(x.shape()) + " vs kernel " +
                     shape_string(w.shape()));
  }
  const std::size_t n = x.dim(0), f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = conv_output_extent(x.dim(2), kh, 2 * p.padding, p.stride);
  const std::size_t ow = conv_output_extent(x.dim(3), kw, 2 * p.padding, p.stride);
  const std::size_t spatial = oh * ow;

  ConvForward<T> fwd{Tensor<T>({n, f, oh, ow}), im2col(x, kh, kw, p)};
  const std::size_t krows = w.numel() / f;
  RowMatrix<T> prod = ConstMap<T>(w.data(), f, krows) * as_matrix(fwd.columns);
  T* out = fwd.output.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < f; ++o) {
      const T* src = prod.data() + o * (n * spatial) + b * spatial;
      std::copy(src, src + spatial, out + (b * f + o) * spatial);
    }
  }
  return fwd;
}

template <typename T>
ConvBackward<T> conv2d_backward(const Shape& input_shape, const Tensor<T>& w,
                                const Tensor<T>& columns, const Tensor<T>& grad_out, ConvParams p) {
  const std::size_t n = grad_out.dim(0), f = grad_out.dim(1);
  const std::size_t spatial = grad_out.dim(2) * grad_out.dim(3);
  const std::size_t krows = w.numel() / f;
  RowMatrix<T> g(f, n * spatial);
  const T* src = grad_out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < f; ++o) {
      std::copy(src + (b * f + o) * spatial, src + (b * f + o + 1) * spatial,
                g.data() + o * (n * spatial) + b * spatial);
    }
  }
  ConvBackward<T> back{Tensor<T>(), Tensor<T>(w.shape())};
  MutMap<T>(back.grad_weight.data(), f, krows).noalias() = g * as_matrix(columns).transpose();
  Tensor<T> grad_cols({krows, n * spatial});
  MutMap<T>(grad_cols.data(), krows, n * spatial).noalias() =
      ConstMap<T>(w.data(), f, krows).transpose() * g;
  back.grad_input = col2im(grad_cols, input_shape, w.dim(2), w.dim(3), p);
  return back;
}

template <typename T>
PoolForward<T> maxpool2x2(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "maxpool2x2 input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("maxpool2x2: input too small " + shape_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  PoolForward<T> fwd{Tensor<T>({n, c, oh, ow}), std::vector<std::uint32_t>(n * c * oh * ow)};
  const T* in = x.data();
  T* out = fwd.output.data();
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++k) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[k] = in[best];
        fwd.argmax[k] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return fwd;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Shape& input_shape, std::span<const std::uint32_t> argmax,
                              const Tensor<T>& grad_out) {
  Tensor<T> grad(input_shape);
  for (std::size_t k = 0; k < argmax.size(); ++k) grad[argmax[k]] += grad_out[k];
  return grad;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> grad(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) grad[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return grad;
}

template <typename T>
Tensor<T> select_columns(const Tensor<T>& x, std::span<const std::size_t> cols) {
  if (x.rank() != 2) throw ShapeError("select_columns: expected rank 2 input, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), width = x.dim(1), k = cols.size();
  for (auto c : cols) {
    if (c >= width) throw ShapeError("select_columns: column " + std::to_string(c) + " outside " + shape_string(x.shape()));
  }
  Tensor<T> out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = x.data() + i * width;
    T* dst = out.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) dst[j] = src[cols[j]];
  }
  return out;
}

template <typename T>
Tensor<T> select_columns_backward(const Tensor<T>& grad_out, std::span<const std::size_t> cols,
                                  std::size_t width) {
  const std::size_t n = grad_out.dim(0), k = cols.size();
  Tensor<T> grad({n, width});
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = grad_out.data() + i * k;
    T* dst = grad.data() + i * width;
    for (std::size_t j = 0; j < k; ++j) dst[cols[j]] += src[j];
  }
  return grad;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("add_bias: expected rank 2 or 4 input, got " + shape_string(x.shape()));
  }
  if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: shape mismatch " + shape_string(x.shape()) + " vs bias " +
                     shape_string(b.shape()));
  }
  Tensor<T> out(x);
  const std::size_t c = x.dim(1), inner = inner_extent(x.shape());
  T* o = out.data();
  for (std::size_t plane = 0; plane < x.dim(0) * c; ++plane) {
    const T bias = b[plane % c];
    for (std::size_t i = 0; i < inner; ++i) o[plane * inner + i] += bias;
  }
  return out;
}

template <typename T>
Tensor<T> reduce_to_channels(const Tensor<T>& grad_out, const Tensor<T>* weights) {
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1), inner = inner_extent(grad_out.shape());
  Tensor<T> out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* g = grad_out.data() + (b * c + ch) * inner;
      if (weights) {
        const T* wt = weights->data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) acc += static_cast<double>(g[i]) * static_cast<double>(wt[i]);
      } else {
        for (std::size_t i = 0; i < inner; ++i) acc += static_cast<double>(g[i]);
      }
    }
    out[ch] = static_cast<T>(acc);
  }
  return out;
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& gates) {
  if (x.rank() < 2 || gates.rank() != 1 || gates.dim(0) != x.dim(1)) {
    throw ShapeError("scale_channels: shape mismatch " + shape_string(x.shape()) + " vs gates " +
                     shape_string(gates.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t c = x.dim(1), inner = inner_extent(x.shape());
  const T* in = x.data();
  T* o = out.data();
  for (std::size_t plane = 0; plane < x.dim(0) * c; ++plane) {
    const T g = gates[plane % c];
    for (std::size_t i = 0; i < inner; ++i) o[plane * inner + i] = in[plane * inner + i] * g;
  }
  return out;
}

template <typename T>
CrossEntropyForward<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: shape mismatch logits " +
                     shape_string(logits.shape()) + " vs labels [" +
                     std::to_string(labels.size()) + "]");
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  CrossEntropyForward<T> fwd{T(0), Tensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(k) + ")");
    }
    const T* row = logits.data() + i * k;
    double peak = row[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - peak);
    const double log_denom = std::log(denom) + peak;
    for (std::size_t j = 0; j < k; ++j) {
      fwd.softmax[i * k + j] = static_cast<T>(std::exp(row[j] - log_denom));
    }
    total += log_denom - static_cast<double>(row[labels[i]]);
  }
  fwd.loss = static_cast<T>(total / static_cast<double>(n));
  return fwd;
}

template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& softmax, std::span<const int> labels,
                                         T grad_loss) {
  const std::size_t n = softmax.dim(0), k = softmax.dim(1);
  Tensor<T> grad(softmax);
  const T scale = grad_loss / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    grad[i * k + static_cast<std::size_t>(labels[i])] -= T(1);
    for (std::size_t j = 0; j < k; ++j) grad[i * k + j] *= scale;
  }
  return grad;
}

#define FLOPSGATE_INSTANTIATE_KERNELS(T)                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> matmul_at_b(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> matmul_a_bt(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> im2col(const Tensor<T>&, std::size_t, std::size_t, ConvParams);           \
  template Tensor<T> col2im(const Tensor<T>&, const Shape&, std::size_t, std::size_t,          \
                            ConvParams);                                                       \
  template ConvForward<T> conv2d(const Tensor<T>&, const Tensor<T>&, ConvParams);              \
  template ConvBackward<T> conv2d_backward(const Shape&, const Tensor<T>&, const Tensor<T>&,   \
                                           const Tensor<T>&, ConvParams);                      \
  template PoolForward<T> maxpool2x2(const Tensor<T>&);                                        \
  template Tensor<T> maxpool2x2_backward(const Shape&, std::span<const std::uint32_t>,         \
                                         const Tensor<T>&);                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> select_columns(const Tensor<T>&, std::span<const std::size_t>);           \
  template Tensor<T> select_columns_backward(const Tensor<T>&, std::span<const std::size_t>,   \
                                             std::size_t);                                     \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> reduce_to_channels(const Tensor<T>&, const Tensor<T>*);                   \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                       \
  template CrossEntropyForward<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>); \
  template Tensor<T> softmax_cross_entropy_backward(const Tensor<T>&, std::span<const int>, T);

FLOPSGATE_INSTANTIATE_KERNELS(float)
FLOPSGATE_INSTANTIATE_KERNELS(double)

}  // namespace flopsgate::kernels
