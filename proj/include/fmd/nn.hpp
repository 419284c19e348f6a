#pragma once

#include <cstddef>

#include "fmd/ops.hpp"
#include "fmd/rng.hpp"
#include "fmd/tensor.hpp"

namespace fmd {

enum class PaddingMode { Zero, Reflect };

/// Square-kernel convolution description shared by the dense, depthwise and
/// transposed variants.
struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_size = 3;
  std::size_t stride = 1;
  PaddingMode padding_mode = PaddingMode::Zero;
  std::size_t padding = 0;
  bool bias = true;

  /// floor((n + 2*padding - kernel)/stride) + 1; throws if not positive.
  std::size_t output_size(std::size_t n) const;
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>& bias = {});

/// One k x k filter per channel: weights [C,1,k,k].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                           const Tensor<T>& bias = {});

/// Depthwise (carrying the stride) followed by a 1x1 pointwise conv.
template <typename T>
Tensor<T> separable_conv2d(const Tensor<T>& x, const Tensor<T>& depthwise_weight,
                           const Tensor<T>& depthwise_bias, const Tensor<T>& pointwise_weight,
                           const Tensor<T>& pointwise_bias, std::size_t stride,
                           PaddingMode padding_mode, std::size_t padding);

/// Transposed convolution with weights [Cin,Cout,k,k]; output is exactly
/// stride*H x stride*W.
template <typename T>
Tensor<T> conv2d_transposed(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                            const Tensor<T>& bias = {});

/// Per-channel transposed convolution, weights [C,1,k,k].
template <typename T>
Tensor<T> depthwise_conv2d_transposed(const Tensor<T>& x, const ConvSpec& spec,
                                      const Tensor<T>& weight, const Tensor<T>& bias = {});

/// (x - mean) / sqrt(var + eps) per sample and channel; no affine parameters.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5));

enum class Activation { ReLU, LeakyReLU, Tanh };

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x, T alpha = T(0.2));

/// Inverted dropout. Identity when !training or rate == 0 (no RNG draws).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng);

}  // namespace fmd
