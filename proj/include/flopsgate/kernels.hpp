#pragma once

// Forward and backward kernels over NCHW tensors. These are pure functions;
// the tape in autodiff.hpp wires them together.

#include <cstdint>
#include <span>
#include <vector>

#include "flopsgate/tensor.hpp"

namespace flopsgate::kernels {

struct ConvParams {
  std::size_t stride = 1;
  std::size_t padding = 0;  // per side; the FLOPs formulas use total padding 2 * padding
};

/// floor((input - kernel + total_padding) / stride) + 1; throws if the kernel
/// does not fit the padded input.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t total_padding,
                               std::size_t stride);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a^T * b
template <typename T>
Tensor<T> matmul_at_b(const Tensor<T>& a, const Tensor<T>& b);
/// a * b^T
template <typename T>
Tensor<T> matmul_a_bt(const Tensor<T>& a, const Tensor<T>& b);

/// x: [N, C, H, W] -> columns [C*KH*KW, N*OH*OW]
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, ConvParams p);
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& input_shape, std::size_t kh, std::size_t kw,
                 ConvParams p);

template <typename T>
struct ConvForward {
  Tensor<T> output;   // [N, F, OH, OW]
  Tensor<T> columns;  // saved for backward
};

/// w: [F, C, KH, KW]
template <typename T>
ConvForward<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, ConvParams p);

template <typename T>
struct ConvBackward {
  Tensor<T> grad_input;
  Tensor<T> grad_weight;
};

template <typename T>
ConvBackward<T> conv2d_backward(const Shape& input_shape, const Tensor<T>& w,
                                const Tensor<T>& columns, const Tensor<T>& grad_out, ConvParams p);

template <typename T>
struct PoolForward {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

template <typename T>
PoolForward<T> maxpool2x2(const Tensor<T>& x);
template <typename T>
Tensor<T> maxpool2x2_backward(const Shape& input_shape, std::span<const std::uint32_t> argmax,
                              const Tensor<T>& grad_out);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out);

/// y[n, k] = x[n, cols[k]] for a rank-2 x.
template <typename T>
Tensor<T> select_columns(const Tensor<T>& x, std::span<const std::size_t> cols);
/// Adjoint of select_columns: scatters grad [N, K] back into [N, width].
template <typename T>
Tensor<T> select_columns_backward(const Tensor<T>& grad_out, std::span<const std::size_t> cols,
                                  std::size_t width);

/// Adds b[c] along axis 1 of a rank-2 or rank-4 tensor.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);
/// Reduces a gradient onto axis 1 (the bias / channel axis) with 64-bit accumulation.
template <typename T>
Tensor<T> reduce_to_channels(const Tensor<T>& grad_out, const Tensor<T>* weights = nullptr);

/// Multiplies every slice along axis 1 by its gate: y[n, c, ...] = x[n, c, ...] * g[c].
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& gates);

template <typename T>
struct CrossEntropyForward {
  T loss;              // mean over the batch
  Tensor<T> softmax;   // [N, K]
};

template <typename T>
CrossEntropyForward<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);
template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& softmax, std::span<const int> labels,
                                         T grad_loss);

}  // namespace flopsgate::kernels
