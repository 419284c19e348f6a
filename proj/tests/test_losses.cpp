#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>

#include "fmd/gradcheck.hpp"
#include "fmd/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace fmd;
using fmd::test::bit_equal;
using fmd::test::random_tensor;
using fmd::test::scratch_dir;

namespace {

using Fn = std::function<Tensor<double>(const Tensor<double>&)>;

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

LayerGraph<double> with_weight(const LayerGraph<double>& g, const std::string& layer, const Tensor<double>& w) {
  LayerGraph<double> out = g;
  out.find(layer)->weight = w;
  return out;
}

}  // namespace

TEST_CASE("hinge discriminator loss") {
  CHECK(hinge_d_loss(Tensor<double>({1}, {2.0}), Tensor<double>({1}, {-3.0})).item() == 0.0);
  CHECK(hinge_d_loss(Tensor<double>({1}, {0.5}), Tensor<double>({1}, {-0.2})).item() == doctest::Approx(1.3));

  // Means over score maps of different sizes.
  Tensor<double> real({1, 1, 2, 2}, {0.0, 2.0, 2.0, 2.0});
  Tensor<double> fake({1, 1, 1, 2}, {-1.0, 0.0});
  CHECK(hinge_d_loss(real, fake).item() == doctest::Approx(0.25 + 0.5));

  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    auto r = random_tensor<double>({2, 1, 3, 3}, rng, -3.0, 3.0);
    auto f = random_tensor<double>({2, 1, 3, 3}, rng, -3.0, 3.0);
    CHECK(hinge_d_loss(r, f).item() >= 0.0);
  }

  SUBCASE("piecewise gradient wrt real scores") {
    Tensor<double> s({2}, {1.5, 0.3});
    s.set_requires_grad(true);
    hinge_d_loss(s, Tensor<double>({2}, {-2.0, -2.0})).backward();
    CHECK(s.grad().at(0) == 0.0);
    CHECK(s.grad().at(1) == doctest::Approx(-0.5));  // -1 per score, averaged over 2
    Fn f = [](const Tensor<double>& x) { return hinge_d_loss(x, Tensor<double>({2}, {-2.0, -2.0})); };
    CHECK(grad_check<double>(f, s.detach(), 1e-6) < 1e-8);
  }
}

TEST_CASE("hinge generator loss") {
  CHECK(hinge_g_loss(Tensor<double>({1}, {2.5})).item() == -2.5);
  CHECK(hinge_g_loss(Tensor<double>({1}, {0.0})).item() == 0.0);
  Tensor<double> s({4}, {0.1, -3.0, 2.0, 7.0});
  s.set_requires_grad(true);
  hinge_g_loss(s).backward();
  const auto g = s.grad();
  for (double v : g.data()) CHECK(v == doctest::Approx(-0.25));
  Fn f = [](const Tensor<double>& x) { return hinge_g_loss(x); };
  CHECK(grad_check<double>(f, s.detach(), 1e-6) < 1e-8);
}

TEST_CASE("total generator loss") {
  auto t = total_g_loss(Tensor<double>::scalar(-1.0), Tensor<double>::scalar(0.02), 100.0);
  CHECK(t.item() == doctest::Approx(1.0));
  CHECK(total_g_loss(Tensor<double>::scalar(-1.0), Tensor<double>::scalar(5.0), 0.0).item() == -1.0);
  CHECK_THROWS(total_g_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0), -1.0));
  // Monotone in both arguments.
  CHECK(total_g_loss(Tensor<double>::scalar(0.1), Tensor<double>::scalar(0.3), 100.0).item() >
        total_g_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.3), 100.0).item());
  CHECK(total_g_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.31), 100.0).item() >
        total_g_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.3), 100.0).item());
}

TEST_CASE("perceptual loss") {
  auto net = builtin_tiny_featurenet(7).cast<double>();
  Rng rng(2);
  auto a = random_tensor<double>({2, 3, 16, 16}, rng);
  auto b = random_tensor<double>({2, 3, 16, 16}, rng);
  CHECK(perceptual_loss(net, a, a).item() == 0.0);
  CHECK(perceptual_loss(net, a, b).item() > 0.0);
  CHECK(perceptual_loss(net, a, b).item() == perceptual_loss(net, b, a).item());
  CHECK_THROWS_AS(perceptual_loss(net, a, random_tensor<double>({2, 3, 8, 16}, rng)), ShapeError);
}

TEST_CASE("perceptual loss on a hand-built two-layer net") {
  // conv 1x1 (3->2) + relu, conv 3x3 (2->2, zero pad 1) + relu, read at relu2.
  FeatureNet<double> net;
  auto c1 = make_conv<double>("c1", LayerKind::Conv, ConvSpec{3, 2, 1, 1, PaddingMode::Zero, 0, true});
  auto c2 = make_conv<double>("c2", LayerKind::Conv, ConvSpec{2, 2, 3, 1, PaddingMode::Zero, 1, true});
  Rng rng(3);
  for (auto* l : {&c1, &c2}) {
    for (auto& v : l->weight.mutable_data()) v = rng.uniform(-1, 1);
    for (auto& v : l->bias.mutable_data()) v = rng.uniform(-0.2, 0.2);
  }
  net.graph.layers = {c1, make_simple<double>("relu1", LayerKind::ReLU), c2,
                      make_simple<double>("relu2", LayerKind::ReLU)};
  net.extraction = "relu2";
  net.input_scale = {0.5, 2.0, 1.0};
  net.input_shift = {0.1, 0.0, -0.3};

  auto oracle_features = [&](const Tensor<double>& x) {
    Tensor<double> mapped(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const std::size_t c = (i / 16) % 3;
      mapped.mutable_data()[i] = x.at(i) * net.input_scale[c] + net.input_shift[c];
    }
    auto stage = [](Tensor<double> y, const Tensor<double>& bias) {
      auto d = y.mutable_data();
      for (std::size_t i = 0; i < y.numel(); ++i) d[i] = std::max(0.0, d[i] + bias.at((i / 16) % 2));
      return y;
    };
    auto h = stage(oracle::conv2d(mapped, c1.weight, 1, 0, false), c1.bias);
    return stage(oracle::conv2d(h, c2.weight, 1, 1, false), c2.bias);
  };

  auto a = random_tensor<double>({1, 3, 4, 4}, rng);
  auto b = random_tensor<double>({1, 3, 4, 4}, rng);
  const auto fa = oracle_features(a), fb = oracle_features(b);
  double expected = 0.0;
  for (std::size_t i = 0; i < fa.numel(); ++i) expected += (fa.at(i) - fb.at(i)) * (fa.at(i) - fb.at(i));
  expected /= 16.0;
  CHECK(perceptual_loss(net, a, b).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("feature net files") {
  const auto dir = scratch_dir("featurenet");
  SUBCASE("builtin is deterministic") {
    Rng rng(4);
    auto x = random_tensor<float>({1, 3, 16, 16}, rng);
    CHECK(bit_equal(builtin_tiny_featurenet(7).features(x), builtin_tiny_featurenet(7).features(x)));
    CHECK(!bit_equal(builtin_tiny_featurenet(7).features(x), builtin_tiny_featurenet(8).features(x)));
    const auto f = builtin_tiny_featurenet(7).features(x);
    CHECK(f.shape() == Shape{1, 64, 16, 16});
  }
  SUBCASE("load then save is byte identical") {
    save_feature_net(builtin_tiny_featurenet(7), dir / "a.fmdc");
    save_feature_net(load_feature_net(dir / "a.fmdc"), dir / "b.fmdc");
    CHECK(read_bytes(dir / "a.fmdc") == read_bytes(dir / "b.fmdc"));
    const auto loaded = load_feature_net(dir / "a.fmdc");
    Rng rng(5);
    auto x = random_tensor<float>({1, 3, 8, 8}, rng);
    CHECK(bit_equal(loaded.features(x), builtin_tiny_featurenet(7).features(x)));
    for (const auto& [name, t] : loaded.graph.named_parameters()) CHECK_FALSE(t.requires_grad());
  }
  SUBCASE("VGG-16 layout reads conv3_3 after its ReLU") {
    Checkpoint vgg;
    const std::size_t widths[][2] = {{3, 64}, {64, 64}, {64, 128}, {128, 128}, {128, 256}, {256, 256},
                                     {256, 256}, {256, 512}, {512, 512}, {512, 512}, {512, 512}, {512, 512},
                                     {512, 512}};
    const char* names[] = {"conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3",
                           "conv4_1", "conv4_2", "conv4_3", "conv5_1", "conv5_2", "conv5_3"};
    Rng rng(6);
    for (std::size_t i = 0; i < 13; ++i) {
      Tensor<float> w({widths[i][1], widths[i][0], 3, 3});
      for (auto& v : w.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.01));
      vgg.tensors.emplace_back(std::string(names[i]) + ".weight", w);
      vgg.tensors.emplace_back(std::string(names[i]) + ".bias", Tensor<float>({widths[i][1]}));
    }
    save_checkpoint(vgg, dir / "vgg16.fmdc");
    const auto net = load_feature_net(dir / "vgg16.fmdc");
    CHECK(net.extraction == "relu3_3");
    const auto end = net.extraction_end();
    REQUIRE(end >= 2);
    CHECK(net.graph.layers[end - 1].kind == LayerKind::ReLU);
    CHECK(net.graph.layers[end - 2].name == "conv3_3");
    CHECK(net.graph.layers[end].name == "pool3");
    std::size_t pools = 0;
    for (std::size_t i = 0; i < end; ++i) pools += net.graph.layers[i].kind == LayerKind::MaxPool;
    CHECK(pools == 2);
    auto x = random_tensor<float>({1, 3, 16, 16}, rng);
    CHECK(net.features(x).shape() == Shape{1, 256, 4, 4});
  }
  SUBCASE("errors") {
    std::ofstream(dir / "junk.fmdc", std::ios::binary) << "FMDC\x01\x00\x00\x00\x05";
    CHECK_THROWS_AS(load_feature_net(dir / "junk.fmdc"), CheckpointError);
    auto net = builtin_tiny_featurenet(1);
    net.graph.meta = {{"extraction", "relu9_9"}};
    save_feature_net(net, dir / "noext.fmdc");
    CHECK_THROWS_AS(load_feature_net(dir / "noext.fmdc"), std::invalid_argument);
  }
}

TEST_CASE("WGAN-GP discriminator loss") {
  Rng rng(7);
  auto real = random_tensor<double>({2, 3, 4, 4}, rng);
  auto fake = random_tensor<double>({2, 3, 4, 4}, rng);
  const double m = 3 * 4 * 4;

  SUBCASE("unit-norm linear critic has zero penalty") {
    // Same unit vector for both samples: the gradient norm is exactly 1.
    auto w = random_tensor<double>({1, 3, 4, 4}, rng);
    double n2 = 0.0;
    for (double v : w.data()) n2 += v * v;
    Tensor<double> tiled({2, 3, 4, 4});
    for (std::size_t i = 0; i < tiled.numel(); ++i) tiled.mutable_data()[i] = w.at(i % 48) / std::sqrt(n2);
    Critic<double> critic = [tiled](const Tensor<double>& x) { return sum_per_sample(mul(x, tiled)); };
    CHECK(gradient_penalty(critic, real, fake, rng).item() < 1e-20);
  }
  SUBCASE("critic 2*sum(x) has penalty lambda*(2*sqrt(M)-1)^2") {
    Critic<double> critic = [](const Tensor<double>& x) { return scale(sum_per_sample(x), 2.0); };
    const double expected_gp = (2.0 * std::sqrt(m) - 1.0) * (2.0 * std::sqrt(m) - 1.0);
    CHECK(gradient_penalty(critic, real, fake, rng).item() == doctest::Approx(expected_gp).epsilon(1e-9));
    const double wdist = 2.0 * (sum(fake).item() - sum(real).item()) / 2.0;
    const auto loss = wgan_gp_d_loss(critic, real, fake, GpConfig{10.0, 0}, rng).item();
    CHECK(loss == doctest::Approx(wdist + 10.0 * expected_gp).epsilon(1e-9));
  }
  SUBCASE("gp_lambda zero is the plain Wasserstein estimate") {
    auto d = build_discriminator<double>(2);
    init_weights(d, 8);
    auto rp = random_tensor<double>({1, 6, 32, 32}, rng), fp = random_tensor<double>({1, 6, 32, 32}, rng);
    const double plain =
        mean(forward_discriminator(d, fp)).item() - mean(forward_discriminator(d, rp)).item();
    CHECK(wgan_gp_d_loss(d, rp, fp, GpConfig{0.0, 0}).item() == doctest::Approx(plain).epsilon(1e-12));
    CHECK_THROWS(wgan_gp_d_loss(d, rp, fp, GpConfig{-1.0, 0}));
  }
}

TEST_CASE("losses pass finite differences through small networks") {
  Rng rng(9);
  auto d = build_discriminator<double>(2);
  init_weights(d, 10);
  for (auto& l : d.layers)
    if (l.weight.defined())
      for (auto& v : l.weight.mutable_data()) v *= 10.0;
  auto g = build_generator<double>(GeneratorConfig{2, 1, Decomposition::ResOnly, 0.0});
  init_weights(g, 11);
  for (auto& l : g.layers)
    if (l.weight.defined())
      for (auto& v : l.weight.mutable_data()) v *= 10.0;
  const auto feat = builtin_tiny_featurenet(12).cast<double>();
  auto blur = random_tensor<double>({1, 3, 32, 32}, rng, -0.5, 0.5);
  auto sharp = random_tensor<double>({1, 3, 32, 32}, rng, -0.5, 0.5);
  auto real_pair = concat_channels(blur, sharp);
  auto fake_pair = concat_channels(blur, random_tensor<double>({1, 3, 32, 32}, rng, -0.5, 0.5));
  const auto w_last = d.find("d5.conv")->weight.detach();
  const auto w_first = d.find("d1.conv")->weight.detach();

  SUBCASE("hinge losses wrt discriminator weights") {
    Fn fd = [&](const Tensor<double>& w) {
      auto dw = with_weight(d, "d5.conv", w);
      return hinge_d_loss(forward_discriminator(dw, real_pair), forward_discriminator(dw, fake_pair));
    };
    CHECK(grad_check<double>(fd, w_last, 1e-6) < 1e-5);
    Fn fg = [&](const Tensor<double>& w) {
      return hinge_g_loss(forward_discriminator(with_weight(d, "d1.conv", w), fake_pair));
    };
    CHECK(grad_check<double>(fg, w_first, 1e-6) < 1e-5);
  }
  SUBCASE("WGAN-GP wrt discriminator weights needs double backward") {
    Fn f = [&](const Tensor<double>& w) {
      Rng fixed(13);
      return wgan_gp_d_loss(with_weight(d, "d1.conv", w), real_pair, fake_pair, GpConfig{10.0, 0}, fixed);
    };
    CHECK(grad_check<double>(f, w_first, 1e-6) < 1e-5);
  }
  SUBCASE("total generator objective wrt the blurred input") {
    auto small_blur = random_tensor<double>({1, 3, 8, 8}, rng, -0.5, 0.5);
    auto small_sharp = random_tensor<double>({1, 3, 8, 8}, rng, -0.5, 0.5);
    auto small_d = build_discriminator<double>(2);
    init_weights(small_d, 14);
    Fn f = [&](const Tensor<double>& x) {
      auto restored = forward_generator(g, x);
      auto content = perceptual_loss(feat, restored, small_sharp);
      // The 8x8 pair is too small for the full stack; score the first two layers.
      auto scores = run_layers(small_d, concat_channels(x, restored), {}, 4);
      return total_g_loss(hinge_g_loss(scores), content, 100.0);
    };
    CHECK(grad_check<double>(f, small_blur, 1e-6) < 1e-5);
  }
}
