#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fmd/nn.hpp"
#include "fmd/rng.hpp"
#include "fmd/tensor.hpp"

namespace fmd {

/// Which parts of the generator use depthwise-separable convolutions. The
/// residual blocks always do.
enum class Decomposition { ResOnly, DownAndRes, UpAndRes };

std::string to_string(Decomposition d);
Decomposition parse_decomposition(std::string_view text);

struct GeneratorConfig {
  std::size_t ngf = 64;
  std::size_t n_blocks = 9;
  Decomposition decomposition = Decomposition::ResOnly;
  double dropout_rate = 0.0;

  void validate() const;
};

enum class LayerKind {
  Conv,
  DepthwiseConv,
  ConvTranspose,
  DepthwiseConvTranspose,
  InstanceNorm,
  ReLU,
  LeakyReLU,
  Tanh,
  Dropout,
  MaxPool,
  ResidualBegin,
  ResidualEnd,
};

const char* kind_name(LayerKind kind);
bool has_weights(LayerKind kind);

template <typename T>
struct Layer {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  ConvSpec conv;
  /// LeakyReLU slope, dropout rate, instance-norm epsilon or pool size.
  double param = 0.0;
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Ordered layer list with named weights. Residual blocks are delimited by
/// ResidualBegin/ResidualEnd markers; everything else runs in sequence.
template <typename T>
struct LayerGraph {
  std::string role;
  std::size_t in_channels = 3;
  double value_min = -1.0;
  double value_max = 1.0;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Layer<T>> layers;

  /// "<layer>.weight" / "<layer>.bias" in layer order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::size_t parameter_count() const;
  const Layer<T>* find(std::string_view name) const;
  Layer<T>* find(std::string_view name);
  std::string meta_value(std::string_view key) const;

  void set_requires_grad(bool value);
  void zero_grad();

  template <typename U>
  LayerGraph<U> cast() const {
    LayerGraph<U> out;
    out.role = role;
    out.in_channels = in_channels;
    out.value_min = value_min;
    out.value_max = value_max;
    out.meta = meta;
    for (const auto& l : layers) {
      Layer<U> c{l.name, l.kind, l.conv, l.param, {}, {}};
      if (l.weight.defined()) c.weight = l.weight.template cast<U>().set_requires_grad(l.weight.requires_grad());
      if (l.bias.defined()) c.bias = l.bias.template cast<U>().set_requires_grad(l.bias.requires_grad());
      out.layers.push_back(std::move(c));
    }
    return out;
  }
};

struct RunOptions {
  bool training = false;
  Rng* rng = nullptr;
};

/// Weighted layer with zero-filled, grad-requiring weights (and bias if the
/// ConvSpec asks for one).
template <typename T>
Layer<T> make_conv(std::string name, LayerKind kind, ConvSpec spec);

/// Weightless layer; `param` as documented on Layer.
template <typename T>
Layer<T> make_simple(std::string name, LayerKind kind, double param = 0.0);

/// Runs layers [0, end) of the graph.
template <typename T>
Tensor<T> run_layers(const LayerGraph<T>& graph, const Tensor<T>& x, RunOptions options = {},
                     std::size_t end = std::numeric_limits<std::size_t>::max());

template <typename T>
LayerGraph<T> build_generator(const GeneratorConfig& cfg);

/// clamp(blurred + branch(blurred), -1, 1). Input must be in [-1,1] with
/// spatial dims divisible by 4.
template <typename T>
Tensor<T> forward_generator(const LayerGraph<T>& generator, const Tensor<T>& blurred,
                            RunOptions options = {});

/// 70x70 PatchGAN over the 6-channel (blurred, candidate) pair.
template <typename T>
LayerGraph<T> build_discriminator(std::size_t ndf = 64);

template <typename T>
Tensor<T> forward_discriminator(const LayerGraph<T>& discriminator, const Tensor<T>& pair);

/// Conv weights ~ N(0, 0.02^2), biases zero, drawn in layer order.
template <typename T>
void init_weights(LayerGraph<T>& graph, std::uint64_t seed);

}  // namespace fmd
