#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fmd/checkpoint.hpp"
#include "fmd/model.hpp"
#include "fmd/rng.hpp"
#include "fmd/tensor.hpp"

namespace fmd {

/// mean(max(0, 1 - real)) + mean(max(0, 1 + fake)) over raw scores.
template <typename T>
Tensor<T> hinge_d_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores);

/// -mean(fake).
template <typename T>
Tensor<T> hinge_g_loss(const Tensor<T>& fake_scores);

/// adv + lambda * content.
template <typename T>
Tensor<T> total_g_loss(const Tensor<T>& adv, const Tensor<T>& content, T lambda);

/// Frozen conv/ReLU/pool stack. Images in [-1,1] are mapped per channel by
/// x * input_scale + input_shift before the first layer, and features are
/// read after layer `extraction`.
template <typename T>
struct FeatureNet {
  LayerGraph<T> graph;
  std::string extraction;
  std::vector<T> input_scale;
  std::vector<T> input_shift;

  /// Index one past the extraction layer.
  std::size_t extraction_end() const;
  Tensor<T> features(const Tensor<T>& image) const;

  template <typename U>
  FeatureNet<U> cast() const {
    FeatureNet<U> out;
    out.graph = graph.template cast<U>();
    out.extraction = extraction;
    out.input_scale.assign(input_scale.begin(), input_scale.end());
    out.input_shift.assign(input_shift.begin(), input_shift.end());
    return out;
  }
};

/// Sum over channels and positions of squared feature differences divided by
/// the extraction map's W*H, averaged over the batch.
template <typename T>
Tensor<T> perceptual_loss(const FeatureNet<T>& net, const Tensor<T>& restored, const Tensor<T>& sharp);

/// One 3x3 conv (3 to 64 channels), He-initialized from `seed`, read at its
/// ReLU at full resolution. Stand-in when no pretrained weights are available.
FeatureNet<float> builtin_tiny_featurenet(std::uint64_t seed);

/// Reads a checkpoint-format file of convK_J.weight/.bias tensors (VGG naming).
/// A pool follows the last conv of every block except the final one. The
/// extraction layer comes from the "extraction" metadata key, else relu3_3
/// when present; input mapping from "input_scale"/"input_shift", else ImageNet
/// mean/std for [0,1] input.
FeatureNet<float> load_feature_net(const std::filesystem::path& path);
Checkpoint feature_net_checkpoint(const FeatureNet<float>& net);
void save_feature_net(const FeatureNet<float>& net, const std::filesystem::path& path);

struct GpConfig {
  double gp_lambda = 10.0;
  std::uint64_t seed = 0;
  void validate() const;
};

template <typename T>
using Critic = std::function<Tensor<T>(const Tensor<T>&)>;

/// mean over samples of (||d sum(critic(x~)) / d x~||_2 - 1)^2 with
/// x~ = u*real + (1-u)*fake, u ~ U[0,1) per sample. Differentiable wrt the
/// critic's parameters through double backward.
template <typename T>
Tensor<T> gradient_penalty(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake, Rng& rng);

/// mean(critic(fake)) - mean(critic(real)) + gp_lambda * penalty.
template <typename T>
Tensor<T> wgan_gp_d_loss(const Critic<T>& critic, const Tensor<T>& real, const Tensor<T>& fake,
                         const GpConfig& cfg, Rng& rng);

template <typename T>
Tensor<T> wgan_gp_d_loss(const LayerGraph<T>& discriminator, const Tensor<T>& real_pair,
                         const Tensor<T>& fake_pair, const GpConfig& cfg, Rng& rng);

/// Draws the interpolation weights from a generator seeded with cfg.seed.
template <typename T>
Tensor<T> wgan_gp_d_loss(const LayerGraph<T>& discriminator, const Tensor<T>& real_pair,
                         const Tensor<T>& fake_pair, const GpConfig& cfg);

}  // namespace fmd
