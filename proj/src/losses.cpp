#include "fmd/losses.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "fmd/ops.hpp"

namespace fmd {

template <typename T>
Tensor<T> hinge_d_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
  auto real_term = mean(relu(add_scalar(scale(real_scores, T(-1)), T(1))));
  auto fake_term = mean(relu(add_scalar(fake_scores, T(1))));
  return add(real_term, fake_term);
}

template <typename T>
Tensor<T> hinge_g_loss(const Tensor<T>& fake_scores) {
  return scale(mean(fake_scores), T(-1));
}

template <typename T>
Tensor<T> total_g_loss(const Tensor<T>& adv, const Tensor<T>& content, T lambda) {
  if (!(lambda >= T(0))) throw std::invalid_argument("total_g_loss: lambda must be non-negative");
  return add(adv, scale(content, lambda));
}

template <typename T>
std::size_t FeatureNet<T>::extraction_end() const {
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    if (graph.layers[i].name == extraction) return i + 1;
  }
  throw std::invalid_argument("feature net: extraction layer '" + extraction + "' not found");
}

template <typename T>
Tensor<T> FeatureNet<T>::features(const Tensor<T>& image) const {
  return run_layers(graph, channel_affine(image, input_scale, input_shift), {}, extraction_end());
}

template <typename T>
Tensor<T> perceptual_loss(const FeatureNet<T>& net, const Tensor<T>& restored, const Tensor<T>& sharp) {
  if (restored.shape() != sharp.shape()) {
    throw ShapeError("perceptual_loss: restored " + shape_str(restored.shape()) + " vs sharp " +
                     shape_str(sharp.shape()));
  }
  auto fr = net.features(restored);
  auto fs = net.features(sharp);
  auto d = sub(fr, fs);
  const T positions = static_cast<T>(fr.dim(0) * fr.dim(2) * fr.dim(3));
  return scale(sum(mul(d, d)), T(1) / positions);
}

namespace {

std::string join(const std::vector<float>& v) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v[i]);
    (void)ec;
    if (i) out += ',';
    out.append(buf, end);
  }
  return out;
}

std::vector<float> split_floats(const std::string& text, const std::string& key) {
  std::vector<float> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    float v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw std::invalid_argument("feature net: bad number '" + item + "' in " + key);
    }
    out.push_back(v);
  }
  if (out.size() != 3) throw std::invalid_argument("feature net: " + key + " needs 3 values");
  return out;
}

// "convB_J" -> (B, J).
bool parse_conv_name(const std::string& name, int& block, int& index) {
  if (name.rfind("conv", 0) != 0) return false;
  const auto us = name.find('_');
  if (us == std::string::npos) return false;
  const char* b = name.data() + 4;
  const char* mid = name.data() + us;
  const char* e = name.data() + name.size();
  return std::from_chars(b, mid, block).ptr == mid && std::from_chars(mid + 1, e, index).ptr == e;
}

}  // namespace

FeatureNet<float> builtin_tiny_featurenet(std::uint64_t seed) {
  // One wide full-resolution block: random ReLU features of 3x3 patches are
  // close to injective, which deeper random stacks are not.
  FeatureNet<float> net;
  net.graph.role = "feature_net";
  Rng rng(seed);
  auto l = make_conv<float>("conv1_1", LayerKind::Conv, ConvSpec{3, 64, 3, 1, PaddingMode::Zero, 1, true});
  const double sd = std::sqrt(2.0 / 27.0);
  for (auto& v : l.weight.mutable_data()) v = static_cast<float>(rng.normal(0.0, sd));
  l.weight.set_requires_grad(false);
  l.bias.set_requires_grad(false);
  net.graph.layers.push_back(std::move(l));
  net.graph.layers.push_back(make_simple<float>("relu1_1", LayerKind::ReLU));
  net.extraction = "relu1_1";
  net.input_scale = {1, 1, 1};
  net.input_shift = {0, 0, 0};
  net.graph.meta = {{"role", "feature_net"},
                    {"source", "builtin:seed=" + std::to_string(seed)},
                    {"extraction", net.extraction},
                    {"input_scale", join(net.input_scale)},
                    {"input_shift", join(net.input_shift)}};
  return net;
}

FeatureNet<float> load_feature_net(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  struct ConvEntry {
    const Tensor<float>* weight = nullptr;
    const Tensor<float>* bias = nullptr;
  };
  std::map<std::pair<int, int>, ConvEntry> convs;
  for (const auto& [name, t] : ckpt.tensors) {
    const auto dot = name.rfind('.');
    int b = 0, j = 0;
    if (dot == std::string::npos || !parse_conv_name(name.substr(0, dot), b, j)) {
      throw std::invalid_argument("feature net " + path.string() + ": unexpected tensor '" + name +
                                  "' (expected convB_J.weight/.bias)");
    }
    const std::string field = name.substr(dot + 1);
    auto& e = convs[{b, j}];
    if (field == "weight") e.weight = &t;
    else if (field == "bias") e.bias = &t;
    else throw std::invalid_argument("feature net " + path.string() + ": unexpected tensor '" + name + "'");
  }
  if (convs.empty()) throw std::invalid_argument("feature net " + path.string() + ": no conv tensors");

  FeatureNet<float> net;
  net.graph.role = "feature_net";
  net.graph.meta = ckpt.meta;
  const int last_block = convs.rbegin()->first.first;
  std::size_t channels = 3;
  for (auto it = convs.begin(); it != convs.end(); ++it) {
    const auto [b, j] = it->first;
    const std::string tag = std::to_string(b) + "_" + std::to_string(j);
    const auto* w = it->second.weight;
    if (!w) throw std::invalid_argument("feature net: conv" + tag + " has no weight");
    if (w->rank() != 4 || w->dim(2) != w->dim(3) || w->dim(2) % 2 == 0 || w->dim(1) != channels) {
      throw std::invalid_argument("feature net: conv" + tag + ".weight has shape " + shape_str(w->shape()) +
                                  ", expected [Cout," + std::to_string(channels) + ",k,k] with odd k");
    }
    const auto* bias = it->second.bias;
    if (bias && bias->shape() != Shape{w->dim(0)}) {
      throw std::invalid_argument("feature net: conv" + tag + ".bias has shape " + shape_str(bias->shape()));
    }
    const std::size_t k = w->dim(2);
    auto l = make_conv<float>("conv" + tag, LayerKind::Conv,
                              ConvSpec{channels, w->dim(0), k, 1, PaddingMode::Zero, k / 2, bias != nullptr});
    l.weight = w->clone();
    if (bias) l.bias = bias->clone();
    channels = w->dim(0);
    net.graph.layers.push_back(std::move(l));
    net.graph.layers.push_back(make_simple<float>("relu" + tag, LayerKind::ReLU));
    auto next = std::next(it);
    if (b != last_block && (next == convs.end() || next->first.first != b)) {
      net.graph.layers.push_back(make_simple<float>("pool" + std::to_string(b), LayerKind::MaxPool, 2));
    }
  }
  net.graph.set_requires_grad(false);

  if (ckpt.has_meta("extraction")) {
    net.extraction = ckpt.meta_value("extraction");
  } else if (convs.count({3, 3})) {
    net.extraction = "relu3_3";
  } else {
    throw std::invalid_argument("feature net " + path.string() +
                                ": no 'extraction' metadata and no conv3_3 layer to default to");
  }
  (void)net.extraction_end();

  if (ckpt.has_meta("input_scale") || ckpt.has_meta("input_shift")) {
    net.input_scale = split_floats(ckpt.meta_value("input_scale"), "input_scale");
    net.input_shift = split_floats(ckpt.meta_value("input_shift"), "input_shift");
  } else {
    // [-1,1] -> [0,1] -> ImageNet standardization.
    const double mean[] = {0.485, 0.456, 0.406}, stdev[] = {0.229, 0.224, 0.225};
    for (int c = 0; c < 3; ++c) {
      net.input_scale.push_back(static_cast<float>(0.5 / stdev[c]));
      net.input_shift.push_back(static_cast<float>((0.5 - mean[c]) / stdev[c]));
    }
  }
  return net;
}

Checkpoint feature_net_checkpoint(const FeatureNet<float>& net) {
  Checkpoint ckpt;
  for (const auto& [name, t] : net.graph.named_parameters()) ckpt.tensors.emplace_back(name, t.detach());
  ckpt.meta = net.graph.meta;
  return ckpt;
}

void save_feature_net(const FeatureNet<float>& net, const std::filesystem::path& path) {
  save_checkpoint(feature_net_checkpoint(net), path);
}

void GpConfig::validate() const {
  if (!(gp_lambda >= 0.0)) throw std::invalid_argument("gp_lambda must be non-negative");
}

template <typename T>
Tensor<T> gradient_penalty(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake, Rng& rng) {
  if (real.shape() != fake.shape()) {
    throw ShapeError("gradient_penalty: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
  }
  EnableGradGuard with_grad;
  const std::size_t n = real.dim(0);
  Tensor<T> u({n});
  for (auto& v : u.mutable_data()) v = static_cast<T>(rng.uniform());
  Tensor<T> mix;
  {
    NoGradGuard no_grad;
    const auto ub = broadcast_per_sample(u, real.shape());
    mix = add(mul(ub, real.detach()), mul(add_scalar(scale(ub, T(-1)), T(1)), fake.detach()));
  }
  Tensor<T> x = mix.detach();
  x.set_requires_grad(true);
  const auto scores = critic(x);
  const auto g = grad(sum(scores), {x}, true)[0];
  if (!g.defined()) return Tensor<T>::scalar(T(1));  // critic ignores its input: norm 0
  // A tiny floor keeps the square root differentiable at a zero gradient.
  const auto norm = pow(add_scalar(sum_per_sample(mul(g, g)), T(1e-12)), T(0.5));
  const auto dev = add_scalar(norm, T(-1));
  return mean(mul(dev, dev));
}

template <typename T>
Tensor<T> wgan_gp_d_loss(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake,
                         const GpConfig& cfg, Rng& rng) {
  cfg.validate();
  auto w = sub(mean(critic(fake)), mean(critic(real)));
  if (cfg.gp_lambda == 0.0) return w;
  return add(w, scale(gradient_penalty(critic, real, fake, rng), static_cast<T>(cfg.gp_lambda)));
}

template <typename T>
Tensor<T> wgan_gp_d_loss(const LayerGraph<T>& discriminator, const Tensor<T>& real_pair,
                         const Tensor<T>& fake_pair, const GpConfig& cfg, Rng& rng) {
  Critic<T> critic = [&discriminator](const Tensor<T>& x) { return forward_discriminator(discriminator, x); };
  return wgan_gp_d_loss(critic, real_pair, fake_pair, cfg, rng);
}

template <typename T>
Tensor<T> wgan_gp_d_loss(const LayerGraph<T>& discriminator, const Tensor<T>& real_pair,
                         const Tensor<T>& fake_pair, const GpConfig& cfg) {
  Rng rng(cfg.seed);
  return wgan_gp_d_loss(discriminator, real_pair, fake_pair, cfg, rng);
}

#define FMD_INSTANTIATE(T)                                                                           \
  template Tensor<T> hinge_d_loss(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> hinge_g_loss(const Tensor<T>&);                                                 \
  template Tensor<T> total_g_loss(const Tensor<T>&, const Tensor<T>&, T);                            \
  template struct FeatureNet<T>;                                                                     \
  template Tensor<T> perceptual_loss(const FeatureNet<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> gradient_penalty(const Critic<T>&, const Tensor<T>&, const Tensor<T>&, Rng&);   \
  template Tensor<T> wgan_gp_d_loss(const Critic<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                    const GpConfig&, Rng&);                                          \
  template Tensor<T> wgan_gp_d_loss(const LayerGraph<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                    const GpConfig&, Rng&);                                          \
  template Tensor<T> wgan_gp_d_loss(const LayerGraph<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                    const GpConfig&);

FMD_INSTANTIATE(float)
FMD_INSTANTIATE(double)

#undef FMD_INSTANTIATE

}  // namespace fmd
