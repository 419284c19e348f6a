#include "fmd/nn.hpp"

#include <memory>
#include <string>

namespace fmd {

std::size_t ConvSpec::output_size(std::size_t n) const {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (n + 2 * padding < kernel_size) {
    throw ShapeError("conv: input size " + std::to_string(n) + " too small for kernel " +
                     std::to_string(kernel_size) + " with padding " + std::to_string(padding));
  }
  return (n + 2 * padding - kernel_size) / stride + 1;
}

namespace {

template <typename T>
void check_input(const Tensor<T>& x, const ConvSpec& spec, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError(std::string(op) + ": channel mismatch, input has " + std::to_string(x.dim(1)) +
                     " channels, spec expects " + std::to_string(spec.in_channels));
  }
}

template <typename T>
void check_weight(const Tensor<T>& w, const Shape& expected, const char* op) {
  if (!w.defined() || w.shape() != expected) {
    throw ShapeError(std::string(op) + ": weights " + (w.defined() ? shape_str(w.shape()) : "<none>") +
                     ", expected " + shape_str(expected));
  }
}

template <typename T>
Tensor<T> maybe_bias(const Tensor<T>& y, const ConvSpec& spec, const Tensor<T>& bias, const char* op) {
  if (!spec.bias) {
    if (bias.defined()) throw ShapeError(std::string(op) + ": bias given but spec.bias is false");
    return y;
  }
  if (!bias.defined()) throw ShapeError(std::string(op) + ": ConvSpec has bias set but no bias tensor was given");
  return add_channel_bias(y, bias);
}

// Applies reflect padding explicitly and returns the zero-padding width left
// for the convolution kernel.
template <typename T>
std::pair<Tensor<T>, std::size_t> pad_input(const Tensor<T>& x, const ConvSpec& spec) {
  if (spec.padding_mode == PaddingMode::Reflect && spec.padding > 0) {
    return {reflect_pad(x, spec.padding), 0};
  }
  return {x, spec.padding};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight, const Tensor<T>& bias) {
  check_input(x, spec, "conv2d");
  check_weight(weight, {spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size}, "conv2d");
  auto [xp, pad] = pad_input(x, spec);
  Tensor<T> y = conv_forward(xp, weight, ConvGeometry{spec.stride, pad, false});
  return maybe_bias(y, spec, bias, "conv2d");
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                           const Tensor<T>& bias) {
  check_input(x, spec, "depthwise_conv2d");
  if (spec.out_channels != spec.in_channels) {
    throw ShapeError("depthwise_conv2d: out_channels must equal in_channels");
  }
  check_weight(weight, {spec.in_channels, 1, spec.kernel_size, spec.kernel_size}, "depthwise_conv2d");
  auto [xp, pad] = pad_input(x, spec);
  Tensor<T> y = conv_forward(xp, weight, ConvGeometry{spec.stride, pad, true});
  return maybe_bias(y, spec, bias, "depthwise_conv2d");
}

template <typename T>
Tensor<T> separable_conv2d(const Tensor<T>& x, const Tensor<T>& depthwise_weight,
                           const Tensor<T>& depthwise_bias, const Tensor<T>& pointwise_weight,
                           const Tensor<T>& pointwise_bias, std::size_t stride,
                           PaddingMode padding_mode, std::size_t padding) {
  if (x.rank() != 4 || depthwise_weight.rank() != 4 || pointwise_weight.rank() != 4) {
    throw ShapeError("separable_conv2d: expected rank-4 input and weights");
  }
  const std::size_t c = x.dim(1);
  ConvSpec dw{c, c, depthwise_weight.dim(2), stride, padding_mode, padding, depthwise_bias.defined()};
  ConvSpec pw{c, pointwise_weight.dim(0), 1, 1, PaddingMode::Zero, 0, pointwise_bias.defined()};
  return conv2d(depthwise_conv2d(x, dw, depthwise_weight, depthwise_bias), pw, pointwise_weight,
                pointwise_bias);
}

namespace {

template <typename T>
Tensor<T> transposed_impl(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                          const Tensor<T>& bias, bool depthwise, const char* op) {
  check_input(x, spec, op);
  if (spec.padding_mode != PaddingMode::Zero) {
    throw ShapeError(std::string(op) + ": only zero padding is supported");
  }
  if (depthwise) {
    if (spec.out_channels != spec.in_channels) {
      throw ShapeError(std::string(op) + ": out_channels must equal in_channels");
    }
    check_weight(weight, {spec.in_channels, 1, spec.kernel_size, spec.kernel_size}, op);
  } else {
    check_weight(weight, {spec.in_channels, spec.out_channels, spec.kernel_size, spec.kernel_size}, op);
  }
  const Shape out_shape{x.dim(0), spec.out_channels, spec.stride * x.dim(2), spec.stride * x.dim(3)};
  // The strided convolution that maps out_shape back onto x must exist; this
  // fixes the output padding implicitly.
  if (spec.output_size(out_shape[2]) != x.dim(2) || spec.output_size(out_shape[3]) != x.dim(3)) {
    throw ShapeError(std::string(op) + ": kernel/stride/padding cannot produce " + shape_str(out_shape) +
                     " from " + shape_str(x.shape()));
  }
  Tensor<T> y = conv_input_grad(x, weight, ConvGeometry{spec.stride, spec.padding, depthwise}, out_shape);
  return maybe_bias(y, spec, bias, op);
}

}  // namespace

template <typename T>
Tensor<T> conv2d_transposed(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                            const Tensor<T>& bias) {
  return transposed_impl(x, spec, weight, bias, false, "conv2d_transposed");
}

template <typename T>
Tensor<T> depthwise_conv2d_transposed(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                                      const Tensor<T>& bias) {
  return transposed_impl(x, spec, weight, bias, true, "depthwise_conv2d_transposed");
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps) {
  if (x.rank() != 4) throw ShapeError("instance_norm: expected NCHW input, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h * w == 0) throw ShapeError("instance_norm: empty spatial extent");
  const T inv_count = T(1) / static_cast<T>(h * w);
  // Built from differentiable primitives so the discriminator supports
  // double backward.
  Tensor<T> mu = scale(spatial_sum(x), inv_count);
  Tensor<T> centered = sub(x, broadcast_spatial(mu, h, w));
  Tensor<T> var = scale(spatial_sum(mul(centered, centered)), inv_count);
  Tensor<T> inv_std = pow(add_scalar(var, eps), T(-0.5));
  return mul(centered, broadcast_spatial(inv_std, h, w));
}

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x, T alpha) {
  switch (kind) {
    case Activation::ReLU:
      return relu(x);
    case Activation::LeakyReLU:
      return leaky_relu(x, alpha);
    case Activation::Tanh:
      return tanh(x);
  }
  throw std::invalid_argument("activation: unknown kind");
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("dropout: rate must be in [0,1]");
  if (!training || rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const T keep_scale = rate >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  return apply_mask(x, std::shared_ptr<const std::vector<T>>(mask));
}

#define FMD_INSTANTIATE(T)                                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvSpec&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const ConvSpec&, const Tensor<T>&,          \
                                      const Tensor<T>&);                                            \
  template Tensor<T> separable_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                      const Tensor<T>&, const Tensor<T>&, std::size_t, PaddingMode, \
                                      std::size_t);                                                 \
  template Tensor<T> conv2d_transposed(const Tensor<T>&, const ConvSpec&, const Tensor<T>&,         \
                                       const Tensor<T>&);                                           \
  template Tensor<T> depthwise_conv2d_transposed(const Tensor<T>&, const ConvSpec&,                 \
                                                 const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> instance_norm(const Tensor<T>&, T);                                            \
  template Tensor<T> activation(Activation, const Tensor<T>&, T);                                   \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);

FMD_INSTANTIATE(float)
FMD_INSTANTIATE(double)

#undef FMD_INSTANTIATE

}  // namespace fmd
