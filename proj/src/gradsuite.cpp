#include "fmd/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>

#include "fmd/gradcheck.hpp"
#include "fmd/losses.hpp"
#include "fmd/model.hpp"
#include "fmd/nn.hpp"
#include "fmd/ops.hpp"

namespace fmd {

namespace {

template <typename T>
using Fn = std::function<Tensor<T>(const Tensor<T>&)>;

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Keeps coordinates at least `margin` away from the corners of relu, clamp
// and leaky relu so the difference quotient never straddles one.
template <typename T>
void avoid_kinks(Tensor<T>& x, double margin) {
  for (auto& v : x.mutable_data()) {
    for (double k : {0.0, 0.5, -0.5}) {
      if (std::abs(v - k) < margin) v = static_cast<T>(k + (v < k ? -2.0 * margin : 2.0 * margin));
    }
  }
}

// sum(f(x) * r) for a fixed random r, so every output coordinate matters.
template <typename T>
Fn<T> projected(Fn<T> f, const Shape& out_shape, Rng& rng) {
  Tensor<T> r = random_tensor<T>(out_shape, rng);
  return [f = std::move(f), r](const Tensor<T>& x) { return sum(mul(f(x), r)); };
}

struct Item {
  std::string name;
  double eps;
};

template <typename T>
struct Precision;
template <>
struct Precision<double> {
  static constexpr double eps = 1e-5;
  static constexpr double composed_eps = 3e-6;
  static constexpr double tolerance = 1e-5;
};
template <>
struct Precision<float> {
  static constexpr double eps = 1e-2;
  static constexpr double composed_eps = 1e-2;
  static constexpr double tolerance = 1e-2;
};

template <typename T>
void scale_weights(LayerGraph<T>& g, double factor) {
  for (auto& l : g.layers)
    if (l.weight.defined())
      for (auto& v : l.weight.mutable_data()) v = static_cast<T>(v * factor);
}

}  // namespace

template <typename T>
double grad_suite_tolerance() {
  return Precision<T>::tolerance;
}

template <typename T>
std::vector<GradSuiteCase> run_grad_suite(const GradSuiteOptions& options) {
  using P = Precision<T>;
  std::vector<GradSuiteCase> results;
  auto record = [&](const std::string& name, double err) {
    auto it = std::find_if(results.begin(), results.end(), [&](const auto& c) { return c.name == name; });
    if (it == results.end()) {
      results.push_back({name, 0, 0.0});
      it = results.end() - 1;
    }
    ++it->instances;
    it->worst = std::max(it->worst, err);
  };
  auto check = [&](const std::string& name, const Fn<T>& f, const Tensor<T>& x, double eps) {
    record(name, grad_check<T>(f, x, eps));
  };

  const auto feature_net = builtin_tiny_featurenet(3).template cast<T>();
  // Composed networks are built once; each trial redraws their weights.
  std::vector<std::pair<std::string, LayerGraph<T>>> generators;
  for (auto d : {Decomposition::ResOnly, Decomposition::DownAndRes, Decomposition::UpAndRes}) {
    generators.emplace_back("generator/" + to_string(d), build_generator<T>(GeneratorConfig{2, 1, d, 0.0}));
  }
  auto discriminator = build_discriminator<T>(2);

  for (std::size_t trial = 0; trial < options.trials; ++trial) {
    Rng rng(options.seed * 7919 + trial);
    const double eps = P::eps;
    const double margin = 2.0 * eps;

    // Elementwise, reductions and structure on a [2,3,4,5] input.
    const Shape s{2, 3, 4, 5};
    auto x = random_tensor<T>(s, rng);
    avoid_kinks(x, margin);
    const auto other = random_tensor<T>(s, rng);
    const std::vector<T> aff_scale{T(0.5), T(-1.5), T(2)}, aff_shift{T(0.1), T(0), T(-0.3)};
    const auto bias3 = random_tensor<T>({3}, rng);
    const std::vector<std::pair<std::string, Fn<T>>> elementwise = {
        {"add", projected<T>([other](const Tensor<T>& t) { return add(t, other); }, s, rng)},
        {"sub", projected<T>([other](const Tensor<T>& t) { return sub(other, t); }, s, rng)},
        {"mul", projected<T>([other](const Tensor<T>& t) { return mul(t, mul(t, other)); }, s, rng)},
        {"scale", projected<T>([](const Tensor<T>& t) { return scale(t, T(-1.7)); }, s, rng)},
        {"add_scalar", projected<T>([](const Tensor<T>& t) { return mul(add_scalar(t, T(0.3)), t); }, s, rng)},
        {"clamp", projected<T>([](const Tensor<T>& t) { return clamp(t, T(-0.5), T(0.5)); }, s, rng)},
        {"relu", projected<T>([](const Tensor<T>& t) { return relu(t); }, s, rng)},
        {"leaky_relu", projected<T>([](const Tensor<T>& t) { return leaky_relu(t, T(0.2)); }, s, rng)},
        {"tanh", projected<T>([](const Tensor<T>& t) { return tanh(t); }, s, rng)},
        {"pow", projected<T>([](const Tensor<T>& t) { return pow(add_scalar(mul(t, t), T(0.5)), T(-0.5)); }, s, rng)},
        {"sum", [](const Tensor<T>& t) { return sum(mul(t, t)); }},
        {"mean", [](const Tensor<T>& t) { return mean(mul(t, t)); }},
        {"sum_per_sample", projected<T>([](const Tensor<T>& t) { return sum_per_sample(mul(t, t)); }, {2}, rng)},
        {"spatial_sum", projected<T>([](const Tensor<T>& t) { return spatial_sum(mul(t, t)); }, {2, 3}, rng)},
        {"channel_sum", projected<T>([](const Tensor<T>& t) { return channel_sum(mul(t, t)); }, {3}, rng)},
        {"channel_affine",
         projected<T>([&](const Tensor<T>& t) { return channel_affine(t, aff_scale, aff_shift); }, s, rng)},
        {"add_channel_bias",
         projected<T>([bias3](const Tensor<T>& t) { return mul(add_channel_bias(t, bias3), t); }, s, rng)},
        {"reflect_pad", projected<T>([](const Tensor<T>& t) { return reflect_pad(t, 2); }, {2, 3, 8, 9}, rng)},
        {"slice_channels", projected<T>([](const Tensor<T>& t) { return slice_channels(t, 1, 2); }, {2, 2, 4, 5}, rng)},
        {"concat_channels",
         projected<T>([other](const Tensor<T>& t) { return concat_channels(t, mul(t, other)); }, {2, 6, 4, 5}, rng)},
        {"reshape", projected<T>([](const Tensor<T>& t) { return reshape(mul(t, t), Shape{6, 20}); }, {6, 20}, rng)},
        {"max_pool", projected<T>([](const Tensor<T>& t) { return max_pool2d(t, 2, 2); }, {2, 3, 2, 2}, rng)},
        {"instance_norm", projected<T>([](const Tensor<T>& t) { return instance_norm(t); }, s, rng)},
        {"dropout", projected<T>(
                        [](const Tensor<T>& t) {
                          Rng mask_rng(11);
                          return dropout(t, 0.3, true, mask_rng);
                        },
                        s, rng)},
    };
    for (const auto& [name, f] : elementwise) check(name, f, x, eps);

    // Convolutions, with respect to the input, the weights and the bias.
    auto cx = random_tensor<T>({2, 3, 6, 7}, rng);
    const ConvSpec dense{3, 4, 3, 2, PaddingMode::Zero, 1, true};
    const ConvSpec reflect{3, 4, 3, 1, PaddingMode::Reflect, 1, true};
    const ConvSpec depth{3, 3, 3, 1, PaddingMode::Zero, 1, true};
    auto w = random_tensor<T>({4, 3, 3, 3}, rng);
    auto b = random_tensor<T>({4}, rng);
    auto dw = random_tensor<T>({3, 1, 3, 3}, rng);
    auto db = random_tensor<T>({3}, rng);
    auto pw = random_tensor<T>({5, 3, 1, 1}, rng);
    auto pb = random_tensor<T>({5}, rng);
    const Shape dense_out{2, 4, 3, 4}, reflect_out{2, 4, 6, 7}, depth_out{2, 3, 6, 7};
    check("conv2d/input", projected<T>([&](const Tensor<T>& t) { return conv2d(t, dense, w, b); }, dense_out, rng), cx,
          eps);
    check("conv2d/weight", projected<T>([&](const Tensor<T>& t) { return conv2d(cx, dense, t, b); }, dense_out, rng), w,
          eps);
    check("conv2d/bias", projected<T>([&](const Tensor<T>& t) { return conv2d(cx, dense, w, t); }, dense_out, rng), b,
          eps);
    check("conv2d_reflect/input",
          projected<T>([&](const Tensor<T>& t) { return conv2d(t, reflect, w, b); }, reflect_out, rng), cx, eps);
    check("depthwise_conv2d/input",
          projected<T>([&](const Tensor<T>& t) { return depthwise_conv2d(t, depth, dw, db); }, depth_out, rng), cx, eps);
    check("depthwise_conv2d/weight",
          projected<T>([&](const Tensor<T>& t) { return depthwise_conv2d(cx, depth, t, db); }, depth_out, rng), dw, eps);
    check("separable_conv2d/input",
          projected<T>(
              [&](const Tensor<T>& t) { return separable_conv2d(t, dw, db, pw, pb, 2, PaddingMode::Reflect, 1); },
              {2, 5, 3, 4}, rng),
          cx, eps);
    check("separable_conv2d/pointwise",
          projected<T>(
              [&](const Tensor<T>& t) { return separable_conv2d(cx, dw, db, t, pb, 1, PaddingMode::Zero, 1); },
              {2, 5, 6, 7}, rng),
          pw, eps);

    auto tx = random_tensor<T>({1, 3, 3, 4}, rng);
    const ConvSpec up{3, 2, 3, 2, PaddingMode::Zero, 1, true};
    const ConvSpec dup{3, 3, 3, 2, PaddingMode::Zero, 1, false};
    auto tw = random_tensor<T>({3, 2, 3, 3}, rng);
    auto tb = random_tensor<T>({2}, rng);
    auto tdw = random_tensor<T>({3, 1, 3, 3}, rng);
    check("conv2d_transposed/input",
          projected<T>([&](const Tensor<T>& t) { return conv2d_transposed(t, up, tw, tb); }, {1, 2, 6, 8}, rng), tx, eps);
    check("conv2d_transposed/weight",
          projected<T>([&](const Tensor<T>& t) { return conv2d_transposed(tx, up, t, tb); }, {1, 2, 6, 8}, rng), tw, eps);
    check("depthwise_conv2d_transposed/input",
          projected<T>([&](const Tensor<T>& t) { return depthwise_conv2d_transposed(t, dup, tdw); }, {1, 3, 6, 8}, rng),
          tx, eps);
    check("depthwise_conv2d_transposed/weight",
          projected<T>([&](const Tensor<T>& t) { return depthwise_conv2d_transposed(tx, dup, t); }, {1, 3, 6, 8}, rng),
          tdw, eps);

    // Losses.
    auto scores = random_tensor<T>({2, 1, 3, 3}, rng, -2.0, 2.0);
    avoid_kinks(scores, margin);
    for (auto& v : scores.mutable_data())
      if (std::abs(std::abs(v) - 1.0) < margin) v = static_cast<T>(v + (v > 0 ? 3 : -3) * margin);
    const auto other_scores = random_tensor<T>({2, 1, 3, 3}, rng, -2.0, 2.0);
    check("hinge_d_loss", [&](const Tensor<T>& t) { return hinge_d_loss(t, other_scores); }, scores, eps);
    check("hinge_g_loss", [](const Tensor<T>& t) { return hinge_g_loss(t); }, scores, eps);
    auto img = random_tensor<T>({1, 3, 6, 6}, rng);
    const auto ref = random_tensor<T>({1, 3, 6, 6}, rng);
    check("perceptual_loss", [&](const Tensor<T>& t) { return perceptual_loss(feature_net, t, ref); }, img, eps);
    check("total_g_loss",
          [&](const Tensor<T>& t) {
            return total_g_loss(hinge_g_loss(slice_channels(t, 0, 1)), perceptual_loss(feature_net, t, ref), T(100));
          },
          img, eps);

    // WGAN-GP: the penalty is a function of a gradient, so this exercises
    // double backward through conv and leaky relu.
    auto real = random_tensor<T>({2, 2, 5, 5}, rng), fake = random_tensor<T>({2, 2, 5, 5}, rng);
    auto kw = random_tensor<T>({3, 2, 3, 3}, rng);
    const std::uint64_t gp_seed = rng.next_u64();
    check("wgan_gp_d_loss/critic_weight",
          [&](const Tensor<T>& k) {
            Critic<T> critic = [&k](const Tensor<T>& in) {
              return leaky_relu(conv_forward(in, k, ConvGeometry{2, 1, false}), T(0.2));
            };
            Rng gp_rng(gp_seed);
            return wgan_gp_d_loss(critic, real, fake, GpConfig{10.0, 0}, gp_rng);
          },
          kw, eps);

    if (!options.composed) continue;
    const double ceps = P::composed_eps;
    for (auto& [name, g] : generators) {
      init_weights(g, rng.next_u64());
      // Larger weights so the branch is not negligible next to the skip.
      scale_weights(g, 10.0);
      auto gx = random_tensor<T>({1, 3, 8, 8}, rng, -0.5, 0.5);
      check(name, projected<T>([&g](const Tensor<T>& t) { return forward_generator(g, t); }, {1, 3, 8, 8}, rng), gx,
            ceps);
    }
    init_weights(discriminator, rng.next_u64());
    // 24x24 is the smallest input with a score map; checked against the
    // input and every conv weight.
    auto pair = random_tensor<T>({1, 6, 24, 24}, rng);
    const auto d_proj = random_tensor<T>({1, 1, 1, 1}, rng);
    auto d_objective = [&]() { return sum(mul(forward_discriminator(discriminator, pair), d_proj)); };
    check("discriminator/input",
          [&](const Tensor<T>& t) { return sum(mul(forward_discriminator(discriminator, t), d_proj)); }, pair, ceps);
    for (auto& layer : discriminator.layers) {
      if (!layer.weight.defined()) continue;
      const Tensor<T> w0 = layer.weight.detach();
      check("discriminator/" + layer.name + ".weight",
            [&](const Tensor<T>& w) {
              const Tensor<T> saved = layer.weight;
              layer.weight = w;
              Tensor<T> out = d_objective();
              layer.weight = saved;
              return out;
            },
            w0, ceps);
    }
  }
  return results;
}

template std::vector<GradSuiteCase> run_grad_suite<float>(const GradSuiteOptions&);
template std::vector<GradSuiteCase> run_grad_suite<double>(const GradSuiteOptions&);
template double grad_suite_tolerance<float>();
template double grad_suite_tolerance<double>();

}  // namespace fmd
