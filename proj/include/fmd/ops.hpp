#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "fmd/tensor.hpp"

// Differentiable primitives. Every backward rule is written in terms of these
// same primitives, so gradients can themselves be differentiated.
namespace fmd {

// Elementwise. Two-tensor forms require identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T alpha);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
/// x^p; non-integer p requires positive inputs.
template <typename T> Tensor<T> pow(const Tensor<T>& a, T p);

/// Multiplies by a fixed elementwise factor (relu/clamp/dropout derivatives).
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& a, std::shared_ptr<const std::vector<T>> mask);

// Reductions and their adjoint broadcasts.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> broadcast_scalar(const Tensor<T>& s, const Shape& shape);
/// [N,...] -> [N]
template <typename T> Tensor<T> sum_per_sample(const Tensor<T>& x);
template <typename T> Tensor<T> broadcast_per_sample(const Tensor<T>& v, const Shape& shape);
/// [N,C,H,W] -> [N,C]
template <typename T> Tensor<T> spatial_sum(const Tensor<T>& x);
template <typename T> Tensor<T> broadcast_spatial(const Tensor<T>& v, std::size_t h, std::size_t w);
/// [N,C,H,W] -> [C]
template <typename T> Tensor<T> channel_sum(const Tensor<T>& x);
template <typename T> Tensor<T> broadcast_channels(const Tensor<T>& b, const Shape& shape);
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b);
/// x[n,c] * scale[c] + shift[c], with constant coefficients.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const std::vector<T>& scale, const std::vector<T>& shift);

// Structural.
template <typename T> Tensor<T> reflect_pad(const Tensor<T>& x, std::size_t width);
template <typename T> Tensor<T> reflect_pad_adjoint(const Tensor<T>& g, std::size_t width);
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T>
Tensor<T> embed_channels(const Tensor<T>& x, std::size_t begin, std::size_t total);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Zero-padded strided cross-correlation geometry. `depthwise` selects one
/// k x k filter per channel (weights [C,1,k,k]); otherwise weights are
/// [Cout,Cin,k,k].
struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool depthwise = false;
};

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry geom);
/// Adjoint of conv_forward with respect to its input; `input_shape` fixes the
/// output size (this is the transposed convolution).
template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& g, const Tensor<T>& w, ConvGeometry geom,
                          const Shape& input_shape);
/// Adjoint of conv_forward with respect to its weights.
template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& x, const Tensor<T>& g, ConvGeometry geom,
                           const Shape& weight_shape);

template <typename T> Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);

}  // namespace fmd
