#include "fmd/model.hpp"

#include <cmath>
#include <stdexcept>

namespace fmd {

std::string to_string(Decomposition d) {
  switch (d) {
    case Decomposition::ResOnly:
      return "ResOnly";
    case Decomposition::DownAndRes:
      return "DownAndRes";
    case Decomposition::UpAndRes:
      return "UpAndRes";
  }
  return "?";
}

Decomposition parse_decomposition(std::string_view text) {
  if (text == "ResOnly") return Decomposition::ResOnly;
  if (text == "DownAndRes") return Decomposition::DownAndRes;
  if (text == "UpAndRes") return Decomposition::UpAndRes;
  throw std::invalid_argument("unknown decomposition '" + std::string(text) +
                              "' (expected ResOnly, DownAndRes or UpAndRes)");
}

void GeneratorConfig::validate() const {
  if (ngf == 0) throw std::invalid_argument("generator: ngf must be positive");
  if (n_blocks == 0) throw std::invalid_argument("generator: n_blocks must be positive");
  if (dropout_rate < 0.0 || dropout_rate > 1.0) {
    throw std::invalid_argument("generator: dropout_rate must be in [0,1]");
  }
}

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv:
      return "conv";
    case LayerKind::DepthwiseConv:
      return "depthwise";
    case LayerKind::ConvTranspose:
      return "transposed";
    case LayerKind::DepthwiseConvTranspose:
      return "depthwise_transposed";
    case LayerKind::InstanceNorm:
      return "instance_norm";
    case LayerKind::ReLU:
      return "relu";
    case LayerKind::LeakyReLU:
      return "leaky_relu";
    case LayerKind::Tanh:
      return "tanh";
    case LayerKind::Dropout:
      return "dropout";
    case LayerKind::MaxPool:
      return "max_pool";
    case LayerKind::ResidualBegin:
      return "residual_begin";
    case LayerKind::ResidualEnd:
      return "residual_end";
  }
  return "unknown";
}

bool has_weights(LayerKind kind) {
  return kind == LayerKind::Conv || kind == LayerKind::DepthwiseConv || kind == LayerKind::ConvTranspose ||
         kind == LayerKind::DepthwiseConvTranspose;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> LayerGraph<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& l : layers) {
    if (l.weight.defined()) out.emplace_back(l.name + ".weight", l.weight);
    if (l.bias.defined()) out.emplace_back(l.name + ".bias", l.bias);
  }
  return out;
}

template <typename T>
std::size_t LayerGraph<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : named_parameters()) total += t.numel();
  return total;
}

template <typename T>
const Layer<T>* LayerGraph<T>::find(std::string_view name) const {
  for (const auto& l : layers)
    if (l.name == name) return &l;
  return nullptr;
}

template <typename T>
Layer<T>* LayerGraph<T>::find(std::string_view name) {
  for (auto& l : layers)
    if (l.name == name) return &l;
  return nullptr;
}

template <typename T>
std::string LayerGraph<T>::meta_value(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return {};
}

template <typename T>
void LayerGraph<T>::set_requires_grad(bool value) {
  for (auto& l : layers) {
    if (l.weight.defined()) l.weight.set_requires_grad(value);
    if (l.bias.defined()) l.bias.set_requires_grad(value);
  }
}

template <typename T>
void LayerGraph<T>::zero_grad() {
  for (auto& l : layers) {
    if (l.weight.defined()) l.weight.zero_grad();
    if (l.bias.defined()) l.bias.zero_grad();
  }
}

namespace {

template <typename T>
Tensor<T> run_layer(const Layer<T>& l, const Tensor<T>& x, const RunOptions& options) {
  switch (l.kind) {
    case LayerKind::Conv:
      return conv2d(x, l.conv, l.weight, l.bias);
    case LayerKind::DepthwiseConv:
      return depthwise_conv2d(x, l.conv, l.weight, l.bias);
    case LayerKind::ConvTranspose:
      return conv2d_transposed(x, l.conv, l.weight, l.bias);
    case LayerKind::DepthwiseConvTranspose:
      return depthwise_conv2d_transposed(x, l.conv, l.weight, l.bias);
    case LayerKind::InstanceNorm:
      return instance_norm(x, static_cast<T>(l.param));
    case LayerKind::ReLU:
      return relu(x);
    case LayerKind::LeakyReLU:
      return leaky_relu(x, static_cast<T>(l.param));
    case LayerKind::Tanh:
      return tanh(x);
    case LayerKind::Dropout: {
      if (!options.training || l.param == 0.0) return x;
      if (!options.rng) throw std::invalid_argument("dropout layer '" + l.name + "' needs an RNG in training");
      return dropout(x, l.param, true, *options.rng);
    }
    case LayerKind::MaxPool: {
      const auto k = static_cast<std::size_t>(l.param);
      return max_pool2d(x, k, k);
    }
    case LayerKind::ResidualBegin:
    case LayerKind::ResidualEnd:
      break;
  }
  throw std::logic_error("run_layer: unexpected layer kind");
}

constexpr double kInstanceNormEps = 1e-5;
constexpr double kLeakySlope = 0.2;

ConvSpec spec_of(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, PaddingMode mode,
                 std::size_t pad) {
  return ConvSpec{cin, cout, k, stride, mode, pad, true};
}

// A k x k (possibly strided) conv, optionally split into depthwise + 1x1.
template <typename T>
void push_conv(std::vector<Layer<T>>& out, const std::string& prefix, std::size_t cin, std::size_t cout,
               std::size_t k, std::size_t stride, PaddingMode mode, std::size_t pad, bool separable) {
  if (!separable) {
    out.push_back(make_conv<T>(prefix + ".conv", LayerKind::Conv, spec_of(cin, cout, k, stride, mode, pad)));
    return;
  }
  out.push_back(make_conv<T>(prefix + ".dw", LayerKind::DepthwiseConv, spec_of(cin, cin, k, stride, mode, pad)));
  out.push_back(make_conv<T>(prefix + ".pw", LayerKind::Conv, spec_of(cin, cout, 1, 1, PaddingMode::Zero, 0)));
}

template <typename T>
void push_deconv(std::vector<Layer<T>>& out, const std::string& prefix, std::size_t cin, std::size_t cout,
                 bool separable) {
  if (!separable) {
    out.push_back(make_conv<T>(prefix + ".deconv", LayerKind::ConvTranspose,
                               spec_of(cin, cout, 3, 2, PaddingMode::Zero, 1)));
    return;
  }
  out.push_back(make_conv<T>(prefix + ".dw", LayerKind::DepthwiseConvTranspose,
                             spec_of(cin, cin, 3, 2, PaddingMode::Zero, 1)));
  out.push_back(make_conv<T>(prefix + ".pw", LayerKind::Conv, spec_of(cin, cout, 1, 1, PaddingMode::Zero, 0)));
}

}  // namespace

template <typename T>
Layer<T> make_conv(std::string name, LayerKind kind, ConvSpec spec) {
  Layer<T> l;
  l.name = std::move(name);
  l.kind = kind;
  l.conv = spec;
  const std::size_t k = spec.kernel_size;
  switch (kind) {
    case LayerKind::Conv:
      l.weight = Tensor<T>({spec.out_channels, spec.in_channels, k, k});
      break;
    case LayerKind::ConvTranspose:
      l.weight = Tensor<T>({spec.in_channels, spec.out_channels, k, k});
      break;
    case LayerKind::DepthwiseConv:
    case LayerKind::DepthwiseConvTranspose:
      l.weight = Tensor<T>({spec.in_channels, 1, k, k});
      break;
    default:
      throw std::logic_error("make_conv: not a convolution kind");
  }
  l.weight.set_requires_grad(true);
  if (spec.bias) {
    l.bias = Tensor<T>({spec.out_channels});
    l.bias.set_requires_grad(true);
  }
  return l;
}

template <typename T>
Layer<T> make_simple(std::string name, LayerKind kind, double param) {
  Layer<T> l;
  l.name = std::move(name);
  l.kind = kind;
  l.param = param;
  return l;
}

template <typename T>
Tensor<T> run_layers(const LayerGraph<T>& graph, const Tensor<T>& x, RunOptions options, std::size_t end) {
  std::vector<Tensor<T>> residuals;
  Tensor<T> h = x;
  const std::size_t stop = std::min(end, graph.layers.size());
  for (std::size_t i = 0; i < stop; ++i) {
    const auto& l = graph.layers[i];
    if (l.kind == LayerKind::ResidualBegin) {
      residuals.push_back(h);
    } else if (l.kind == LayerKind::ResidualEnd) {
      if (residuals.empty()) throw std::logic_error("run_layers: unmatched residual end at '" + l.name + "'");
      h = add(residuals.back(), h);
      residuals.pop_back();
    } else {
      h = run_layer(l, h, options);
    }
  }
  return h;
}

template <typename T>
LayerGraph<T> build_generator(const GeneratorConfig& cfg) {
  cfg.validate();
  const std::size_t f = cfg.ngf;
  const bool sep_down = cfg.decomposition == Decomposition::DownAndRes;
  const bool sep_up = cfg.decomposition == Decomposition::UpAndRes;

  LayerGraph<T> g;
  g.role = "generator";
  g.in_channels = 3;
  g.meta = {{"ngf", std::to_string(cfg.ngf)},
            {"n_blocks", std::to_string(cfg.n_blocks)},
            {"decomposition", to_string(cfg.decomposition)},
            {"dropout_rate", std::to_string(cfg.dropout_rate)}};
  auto& L = g.layers;

  auto norm_relu = [&](const std::string& p) {
    L.push_back(make_simple<T>(p + ".norm", LayerKind::InstanceNorm, kInstanceNormEps));
    L.push_back(make_simple<T>(p + ".relu", LayerKind::ReLU));
  };

  push_conv(L, "head", 3, f, 7, 1, PaddingMode::Reflect, 3, false);
  norm_relu("head");
  push_conv(L, "down1", f, 2 * f, 3, 2, PaddingMode::Zero, 1, sep_down);
  norm_relu("down1");
  push_conv(L, "down2", 2 * f, 4 * f, 3, 2, PaddingMode::Zero, 1, sep_down);
  norm_relu("down2");

  const std::size_t w = 4 * f;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    L.push_back(make_simple<T>(p + ".begin", LayerKind::ResidualBegin));
    L.push_back(make_conv<T>(p + ".dw1", LayerKind::DepthwiseConv, spec_of(w, w, 3, 1, PaddingMode::Reflect, 1)));
    L.push_back(make_conv<T>(p + ".pw1", LayerKind::Conv, spec_of(w, w, 1, 1, PaddingMode::Zero, 0)));
    L.push_back(make_simple<T>(p + ".norm1", LayerKind::InstanceNorm, kInstanceNormEps));
    L.push_back(make_simple<T>(p + ".relu", LayerKind::ReLU));
    L.push_back(make_simple<T>(p + ".dropout", LayerKind::Dropout, cfg.dropout_rate));
    L.push_back(make_conv<T>(p + ".dw2", LayerKind::DepthwiseConv, spec_of(w, w, 3, 1, PaddingMode::Reflect, 1)));
    L.push_back(make_conv<T>(p + ".pw2", LayerKind::Conv, spec_of(w, w, 1, 1, PaddingMode::Zero, 0)));
    L.push_back(make_simple<T>(p + ".norm2", LayerKind::InstanceNorm, kInstanceNormEps));
    L.push_back(make_simple<T>(p + ".end", LayerKind::ResidualEnd));
  }

  push_deconv(L, "up1", 4 * f, 2 * f, sep_up);
  norm_relu("up1");
  push_deconv(L, "up2", 2 * f, f, sep_up);
  norm_relu("up2");
  push_conv(L, "tail", f, 3, 7, 1, PaddingMode::Reflect, 3, false);
  L.push_back(make_simple<T>("tail.tanh", LayerKind::Tanh));
  return g;
}

template <typename T>
Tensor<T> forward_generator(const LayerGraph<T>& generator, const Tensor<T>& blurred, RunOptions options) {
  if (blurred.rank() != 4 || blurred.dim(1) != generator.in_channels) {
    throw ShapeError("generator: expected [N," + std::to_string(generator.in_channels) + ",H,W] input, got " +
                     shape_str(blurred.shape()));
  }
  if (blurred.dim(2) % 4 != 0 || blurred.dim(3) % 4 != 0) {
    throw ShapeError("generator: spatial size " + std::to_string(blurred.dim(2)) + "x" +
                     std::to_string(blurred.dim(3)) +
                     " is not divisible by 4; reflect-pad the image to a multiple of 4 first");
  }
  if (blurred.dim(2) < 8 || blurred.dim(3) < 8) {
    throw ShapeError("generator: spatial size " + std::to_string(blurred.dim(2)) + "x" +
                     std::to_string(blurred.dim(3)) + " is below the 8x8 minimum; pad the image first");
  }
  for (const T v : blurred.data()) {
    if (!(v >= T(-1.001) && v <= T(1.001))) {
      throw std::invalid_argument("generator: input must be normalized to [-1,1], found value " +
                                  std::to_string(static_cast<double>(v)));
    }
  }
  Tensor<T> branch = run_layers(generator, blurred, options);
  return clamp(add(blurred, branch), T(-1), T(1));
}

template <typename T>
LayerGraph<T> build_discriminator(std::size_t ndf) {
  if (ndf == 0) throw std::invalid_argument("discriminator: ndf must be positive");
  LayerGraph<T> d;
  d.role = "discriminator";
  d.in_channels = 6;
  d.meta = {{"ndf", std::to_string(ndf)}};
  auto& L = d.layers;
  const std::size_t widths[] = {6, ndf, 2 * ndf, 4 * ndf, 8 * ndf, 1};
  const std::size_t strides[] = {2, 2, 2, 1, 1};
  for (std::size_t i = 0; i < 5; ++i) {
    const std::string p = "d" + std::to_string(i + 1);
    L.push_back(make_conv<T>(p + ".conv", LayerKind::Conv,
                             spec_of(widths[i], widths[i + 1], 4, strides[i], PaddingMode::Zero, 1)));
    if (i == 4) break;
    if (i > 0) L.push_back(make_simple<T>(p + ".norm", LayerKind::InstanceNorm, kInstanceNormEps));
    L.push_back(make_simple<T>(p + ".lrelu", LayerKind::LeakyReLU, kLeakySlope));
  }
  return d;
}

template <typename T>
Tensor<T> forward_discriminator(const LayerGraph<T>& discriminator, const Tensor<T>& pair) {
  if (pair.rank() != 4 || pair.dim(1) != discriminator.in_channels) {
    throw ShapeError("discriminator: expected " + std::to_string(discriminator.in_channels) +
                     "-channel input, got " + shape_str(pair.shape()));
  }
  return run_layers(discriminator, pair);
}

template <typename T>
void init_weights(LayerGraph<T>& graph, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& l : graph.layers) {
    if (l.weight.defined()) {
      for (auto& v : l.weight.mutable_data()) v = static_cast<T>(rng.normal(0.0, 0.02));
    }
    if (l.bias.defined()) {
      for (auto& v : l.bias.mutable_data()) v = T(0);
    }
  }
}

#define FMD_INSTANTIATE(T)                                                                          \
  template struct LayerGraph<T>;                                                                    \
  template Tensor<T> run_layers(const LayerGraph<T>&, const Tensor<T>&, RunOptions, std::size_t);  \
  template LayerGraph<T> build_generator<T>(const GeneratorConfig&);                                \
  template Tensor<T> forward_generator(const LayerGraph<T>&, const Tensor<T>&, RunOptions);        \
  template LayerGraph<T> build_discriminator<T>(std::size_t);                                       \
  template Tensor<T> forward_discriminator(const LayerGraph<T>&, const Tensor<T>&);                \
  template void init_weights(LayerGraph<T>&, std::uint64_t);                                       \
  template Layer<T> make_conv<T>(std::string, LayerKind, ConvSpec);                                 \
  template Layer<T> make_simple<T>(std::string, LayerKind, double);

FMD_INSTANTIATE(float)
FMD_INSTANTIATE(double)

#undef FMD_INSTANTIATE

}  // namespace fmd
