#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fmd/checkpoint.hpp"
#include "fmd/datakit.hpp"
#include "fmd/losses.hpp"
#include "fmd/model.hpp"
#include "fmd/rng.hpp"
#include "fmd/tensor.hpp"

namespace fmd {

enum class AdvLoss { Hinge, WganGp };

std::string to_string(AdvLoss loss);
AdvLoss parse_adv_loss(std::string_view text);

/// Defaults are desk scale (crop 64, 20 + 20 epochs); full_scale() gives the
/// published schedule.
struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs_constant = 20;
  std::size_t epochs_decay = 20;
  std::size_t batch = 1;
  double lambda_content = 100.0;
  std::size_t d_steps_per_g = 1;
  AdvLoss adv_loss = AdvLoss::Hinge;
  double gp_lambda = 10.0;
  std::size_t crop = 64;
  std::uint64_t seed = 0;
  double dropout_rate = 0.0;
  std::size_t ngf = 64;
  std::size_t n_blocks = 9;
  Decomposition decomposition = Decomposition::ResOnly;
  std::size_t ndf = 64;
  /// "builtin" or a feature-net checkpoint path.
  std::string feature_net = "builtin";
  /// Stop after this many steps in total; 0 runs the whole schedule.
  std::size_t max_steps = 0;
  /// Checkpoint cadence in steps; 0 writes only at the end.
  std::size_t checkpoint_every = 0;
  /// Pairs scored for PSNR/SSIM at each epoch end; 0 disables.
  std::size_t eval_pairs = 8;

  static TrainConfig full_scale();
  void validate() const;
  std::size_t total_epochs() const { return epochs_constant + epochs_decay; }
  GeneratorConfig generator() const { return {ngf, n_blocks, decomposition, dropout_rate}; }

  /// Every field as text, keyed by field name, in declaration order.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  /// Throws std::invalid_argument on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
};

/// Parses `key = value` lines; '#' starts a comment.
TrainConfig read_config_file(const std::filesystem::path& path, TrainConfig base = {});

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
};

/// Bias-corrected Adam, updating each parameter in place. A non-finite
/// gradient aborts before anything is modified and names the tensor.
void adam_step(const std::vector<std::pair<std::string, Tensor<float>>>& params,
               const std::vector<Tensor<float>>& grads, AdamState& state, double lr, double beta1,
               double beta2, double eps = 1e-8);

/// Constant for epochs_constant epochs, then linear to 0 at the final epoch.
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

struct StepLosses {
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_content = 0.0;
  double g_total = 0.0;
};

/// Everything needed to continue training bit-exactly.
struct TrainState {
  TrainConfig cfg;
  LayerGraph<float> generator;
  LayerGraph<float> discriminator;
  FeatureNet<float> features;
  AdamState g_opt;
  AdamState d_opt;
  Rng rng;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  /// Index into `order` of the next sample in the current epoch.
  std::size_t position = 0;
  std::vector<std::size_t> order;
  /// Dataset identifiers this model was trained on, oldest first.
  std::vector<std::string> provenance;
  /// Freeze D during train_step (its parameters are never updated).
  bool freeze_discriminator = false;
};

TrainState init_training(const TrainConfig& cfg);

/// Gradients of the generator objective, one per generator parameter.
std::vector<Tensor<float>> generator_gradients(TrainState& state, const Tensor<float>& blurred,
                                               const Tensor<float>& sharp, StepLosses* losses = nullptr);

/// d_steps_per_g discriminator updates on the detached restoration, then one
/// generator update. Inputs are normalized [N,3,H,W] batches.
StepLosses train_step(TrainState& state, const Tensor<float>& blurred, const Tensor<float>& sharp,
                      double lr);

struct EvalResult {
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t count = 0;
};

/// Reflect-pads to a multiple of 4 (and at least 8) and crops back.
Image deblur_image(const LayerGraph<float>& generator, const Image& blurred);

/// Mean PSNR/SSIM over the first `limit` pairs (0 = all). A null generator
/// scores the blurred inputs directly.
EvalResult evaluate(const LayerGraph<float>* generator, const DatasetIndex& dataset,
                    std::size_t limit = 0, std::size_t center_crop = 0);

Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const Checkpoint& ckpt);

/// Generator weights only, for inference.
LayerGraph<float> generator_from_checkpoint(const Checkpoint& ckpt);

struct TrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path history;
  std::filesystem::path eval_log;
};

TrainOutputs output_paths(const std::filesystem::path& out_dir);

/// Continues `state` until the schedule or cfg.max_steps is exhausted, writing
/// history.tsv (one row per step), eval.tsv (one row per epoch) and
/// checkpoint.fmdc under out_dir.
void run_training(TrainState& state, const DatasetIndex& dataset, const std::filesystem::path& out_dir);

/// Fresh run on one dataset.
TrainState train(const TrainConfig& cfg, const DatasetIndex& dataset, const std::filesystem::path& out_dir);

/// Reloads out_dir's checkpoint, drops history rows past it and continues.
/// max_steps overrides the stored value when nonzero.
TrainState resume(const std::filesystem::path& out_dir, const DatasetIndex& dataset, std::size_t max_steps = 0);

/// Continues optimizing a trained model on a second dataset with a fresh
/// schedule and optimizer state. The architecture in cfg must match.
TrainState fine_tune(const Checkpoint& pretrained, const DatasetIndex& dataset, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir);

class ArchitectureMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fmd
