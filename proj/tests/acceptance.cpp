// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fmd/checkpoint.hpp"
#include "fmd/datakit.hpp"
#include "fmd/gradsuite.hpp"
#include "fmd/losses.hpp"
#include "fmd/model.hpp"
#include "fmd/nn.hpp"
#include "fmd/ops.hpp"
#include "fmd/profiler.hpp"
#include "fmd/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace fmd;
using fmd::test::max_abs_diff;
using fmd::test::random_tensor;
using fmd::test::scratch_dir;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Published figures print millions truncated to the shown digits.
std::string millions(std::uint64_t n, int digits) {
  const double scale = std::pow(10.0, digits);
  return fmt(digits == 2 ? "%.2fM" : "%.3fM", std::floor(n / 1e6 * scale) / scale);
}

Outcome parameter_counts() {
  Outcome o;
  struct Row {
    GeneratorConfig cfg;
    std::uint64_t expected;
    const char* published;
    int digits;
  };
  const std::vector<Row> rows = {
      {{48, 9, Decomposition::ResOnly, 0.0}, 1130883, "1.13M", 2},
      {{64, 9, Decomposition::ResOnly, 0.0}, 1987075, "1.98M", 2},
      {{96, 9, Decomposition::ResOnly, 0.0}, 4418307, "4.41M", 2},
      {{64, 9, Decomposition::DownAndRes, 0.0}, 1661315, "1.661M", 3},
      {{64, 9, Decomposition::UpAndRes, 0.0}, 1663235, "1.663M", 3},
  };
  for (const auto& r : rows) {
    const auto n = count_params(build_generator<float>(r.cfg)).total_params;
    const bool sep_down = r.cfg.decomposition == Decomposition::DownAndRes;
    const bool sep_up = r.cfg.decomposition == Decomposition::UpAndRes;
    const auto closed = oracle::generator_counts(r.cfg.ngf, 9, sep_down, sep_up, 256, 256).params;
    const std::string tag = to_string(r.cfg.decomposition) + "/ngf" + std::to_string(r.cfg.ngf);
    o.require(n == r.expected && n == closed, tag + " counted " + std::to_string(n));
    o.require(millions(n, r.digits) == r.published, tag + " shows as " + millions(n, r.digits));
  }
  if (o.pass) o.note("1130883, 1987075, 4418307, 1661315, 1663235");
  return o;
}

Outcome mac_counts() {
  Outcome o;
  const std::vector<std::pair<std::size_t, double>> rows = {{64, 18.36e9}, {48, 10.60e9}, {96, 40.23e9}};
  for (auto [ngf, published] : rows) {
    const auto g = build_generator<float>(GeneratorConfig{ngf, 9, Decomposition::ResOnly, 0.0});
    const double macs = static_cast<double>(count_macs(g, 256, 256).total_macs);
    const double rel = std::abs(macs - published) / published;
    o.require(rel < 0.005, "ngf" + std::to_string(ngf) + " off by " + fmt("%.3f%%", 100 * rel));
    o.note("ngf" + std::to_string(ngf) + " " + fmt("%.4gG", macs / 1e9) + " (" + fmt("%.2f%%", 100 * rel) + ")");
  }
  return o;
}

Outcome gradients() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_grad_suite<double>(GradSuiteOptions{20, 0, true});
  const double secs = seconds_since(t0);
  const double tol = 1e-5;
  double worst_op = 0.0;
  for (const auto& c : cases) {
    o.require(c.instances >= 20, c.name + " ran " + std::to_string(c.instances) + " instances");
    if (c.worst >= tol) o.require(false, c.name + " " + fmt("%.3g", c.worst));
    if (c.name.rfind("generator/", 0) != 0 && c.name.rfind("discriminator/", 0) != 0)
      worst_op = std::max(worst_op, c.worst);
  }
  o.require(secs < 300.0, "took " + fmt("%.0f s", secs));
  o.note(std::to_string(cases.size()) + " cases x 20; worst over ops and losses " + fmt("%.3g", worst_op) + "; " +
         fmt("%.0f s", secs));
  return o;
}

Outcome oracle_equivalences() {
  Outcome o;
  Rng rng(2024);
  double conv_err = 0.0, dw_err = 0.0, tr_err = 0.0, adj_err = 0.0;
  const int cases = 120;
  for (int t = 0; t < cases; ++t) {
    const std::size_t n = 1 + rng.below(2), cin = 1 + rng.below(4), cout = 1 + rng.below(4);
    const std::size_t k = 1 + rng.below(4), stride = 1 + rng.below(2), pad = rng.below(k);
    const std::size_t h = k + rng.below(6), w = k + rng.below(6);
    auto x = random_tensor<double>({n, cin, h, w}, rng);
    auto wd = random_tensor<double>({cout, cin, k, k}, rng);
    auto y = conv_forward(x, wd, ConvGeometry{stride, pad, false});
    conv_err = std::max(conv_err, max_abs_diff(y, oracle::conv2d(x, wd, stride, pad, false)));
    auto wdw = random_tensor<double>({cin, 1, k, k}, rng);
    auto ydw = conv_forward(x, wdw, ConvGeometry{stride, pad, true});
    dw_err = std::max(dw_err, max_abs_diff(ydw, oracle::conv2d(x, wdw, stride, pad, true)));
    auto g = random_tensor<double>(y.shape(), rng);
    auto tr = conv_input_grad(g, wd, ConvGeometry{stride, pad, false}, x.shape());
    tr_err = std::max(tr_err, max_abs_diff(tr, oracle::conv2d_transposed(g, wd, stride, pad, h, w, false)));
    // <conv(x), g> == <x, conv^T(g)>
    const double lhs = sum(mul(y, g)).item(), rhs = sum(mul(x, tr)).item();
    adj_err = std::max(adj_err, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  // The layer-level transposed conv against the same adjoint identity.
  for (int t = 0; t < 20; ++t) {
    const std::size_t cin = 1 + rng.below(4), cout = 1 + rng.below(4);
    auto w = random_tensor<double>({cin, cout, 3, 3}, rng);
    auto x = random_tensor<double>({1, cout, 8, 8}, rng);
    auto g = random_tensor<double>({1, cin, 4, 4}, rng);
    ConvSpec s{cin, cout, 3, 2, PaddingMode::Zero, 1, false};
    const double lhs = sum(mul(conv_forward(x, w, ConvGeometry{2, 1, false}), g)).item();
    const double rhs = sum(mul(x, conv2d_transposed(g, s, w))).item();
    adj_err = std::max(adj_err, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  double sep_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t cin = 2 + rng.below(3), cout = 1 + rng.below(4), stride = 1 + rng.below(2);
    auto x = random_tensor<double>({1, cin, 9, 8}, rng);
    auto dw = random_tensor<double>({cin, 1, 3, 3}, rng);
    auto pw = random_tensor<double>({cout, cin, 1, 1}, rng);
    Tensor<double> dense({cout, cin, 3, 3});
    auto d = dense.mutable_data();
    for (std::size_t oc = 0; oc < cout; ++oc)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t i = 0; i < 9; ++i) d[(oc * cin + c) * 9 + i] = pw.at(oc * cin + c) * dw.at(c * 9 + i);
    auto y = separable_conv2d(x, dw, Tensor<double>{}, pw, Tensor<double>{}, stride, PaddingMode::Zero, 1);
    sep_err = std::max(sep_err, max_abs_diff(y, oracle::conv2d(x, dense, stride, 1, false)));
  }
  o.require(conv_err < 1e-6, "conv " + fmt("%.3g", conv_err));
  o.require(dw_err < 1e-6, "depthwise " + fmt("%.3g", dw_err));
  o.require(tr_err < 1e-6, "transposed " + fmt("%.3g", tr_err));
  o.require(sep_err < 1e-5, "separable " + fmt("%.3g", sep_err));
  o.require(adj_err < 1e-10, "adjoint " + fmt("%.3g", adj_err));
  o.note(std::to_string(cases) + " cases each; max diffs conv " + fmt("%.2g", conv_err) + ", depthwise " +
         fmt("%.2g", dw_err) + ", transposed " + fmt("%.2g", tr_err) + ", separable " + fmt("%.2g", sep_err) +
         ", adjoint " + fmt("%.2g", adj_err));
  return o;
}

Outcome loss_identities() {
  Outcome o;
  auto t = [](std::vector<double> v) {
    Tensor<double> x({1, 1, 1, v.size()});
    std::copy(v.begin(), v.end(), x.mutable_data().begin());
    return x;
  };
  const double satisfied = hinge_d_loss(t({1.5, 2.0}), t({-1.2, -3.0})).item();
  o.require(satisfied == 0.0, "margin-satisfied hinge_d " + fmt("%g", satisfied));
  // relu(1 - 0.5) + relu(1 + (-0.2)) = 0.5 + 0.8
  const double mixed = hinge_d_loss(t({0.5}), t({-0.2})).item();
  o.require(std::abs(mixed - 1.3) < 1e-12, "hinge_d(0.5, -0.2) " + fmt("%.17g", mixed));

  Rng rng(3);
  const auto net = builtin_tiny_featurenet(0).cast<double>();
  auto img = random_tensor<double>({1, 3, 16, 16}, rng);
  const double self = perceptual_loss(net, img, img).item();
  o.require(self == 0.0, "perceptual(x,x) " + fmt("%g", self));

  Tensor<double> adv(Shape{}), content(Shape{});
  adv.mutable_data()[0] = 0.75;
  content.mutable_data()[0] = 0.0125;
  const double total = total_g_loss(adv, content, 100.0).item();
  o.require(std::abs(total - 2.0) < 1e-12, "total_g_loss " + fmt("%.17g", total));

  // Linear critic with a unit weight vector has gradient norm exactly 1.
  auto w = random_tensor<double>({1, 3, 4, 4}, rng);
  double n2 = 0.0;
  for (double v : w.data()) n2 += v * v;
  Tensor<double> unit({2, 3, 4, 4});
  for (std::size_t i = 0; i < unit.numel(); ++i) unit.mutable_data()[i] = w.at(i % 48) / std::sqrt(n2);
  Critic<double> critic = [unit](const Tensor<double>& x) { return sum_per_sample(mul(x, unit)); };
  const double gp = gradient_penalty(critic, random_tensor<double>({2, 3, 4, 4}, rng),
                                     random_tensor<double>({2, 3, 4, 4}, rng), rng)
                        .item();
  o.require(gp < 1e-20, "unit critic penalty " + fmt("%.3g", gp));
  o.note("hinge_d 0 and " + fmt("%.15g", mixed) + ", perceptual(x,x) " + fmt("%g", self) + ", total " +
         fmt("%.15g", total) + ", penalty " + fmt("%.2g", gp));
  return o;
}

Image clamp_add(const Image& a, int delta) {
  Image b = a;
  for (auto& p : b.pixels) p = static_cast<std::uint8_t>(std::clamp(p + delta, 0, 255));
  return b;
}

struct DynamicsRun {
  double baseline = 0.0;
  double final_psnr = 0.0;
  double final_ssim = 0.0;
  bool finite = true;
  std::size_t rows = 0;
  double secs = 0.0;
};

DynamicsRun train_dynamics(const DatasetIndex& ds, TrainConfig cfg, const std::filesystem::path& out) {
  DynamicsRun r;
  r.baseline = evaluate(nullptr, ds).psnr;
  const auto t0 = std::chrono::steady_clock::now();
  const auto state = train(cfg, ds, out);
  r.secs = seconds_since(t0);
  const auto fin = evaluate(&state.generator, ds);
  r.final_psnr = fin.psnr;
  r.final_ssim = fin.ssim;
  std::ifstream in(output_paths(out).history);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    double v;
    while (row >> v) r.finite = r.finite && std::isfinite(v);
    ++r.rows;
  }
  return r;
}

Outcome training_dynamics() {
  Outcome o;
  const auto root = scratch_dir("acceptance_dynamics");
  std::filesystem::create_directories(root / "data" / "blur");
  std::filesystem::create_directories(root / "data" / "sharp");
  for (int i = 0; i < 8; ++i) {
    const Image s = synthetic_image(64, 64, 100 + i);
    const Image b = apply_blur(s, gen_motion_kernel(200 + i, 9, 12), 1.0, 300 + i);
    const std::string name = "p" + std::to_string(i) + ".ppm";
    write_image(s, root / "data" / "sharp" / name);
    write_image(b, root / "data" / "blur" / name);
  }
  const auto ds = load_dataset(root / "data");

  TrainConfig cfg;
  cfg.ngf = FMD_ACCEPTANCE_NGF;
  cfg.epochs_constant = 125;  // 250 epochs of 8 pairs = 2000 steps
  cfg.epochs_decay = 125;
  cfg.eval_pairs = 0;

  const auto hinge = train_dynamics(ds, cfg, root / "hinge");
  const double gain = hinge.final_psnr - hinge.baseline;
  o.require(hinge.rows == 2000, "hinge ran " + std::to_string(hinge.rows) + " steps");
  o.require(hinge.finite, "hinge losses not finite");
  o.require(gain >= 5.0, "hinge gain " + fmt("%.2f dB", gain));
  o.require(hinge.secs < 1800.0, "hinge took " + fmt("%.0f s", hinge.secs));

  cfg.adv_loss = AdvLoss::WganGp;
  const auto wgan = train_dynamics(ds, cfg, root / "wgan");
  const double wgain = wgan.final_psnr - wgan.baseline;
  o.require(wgan.rows == 2000, "wgan_gp ran " + std::to_string(wgan.rows) + " steps");
  o.require(wgan.finite, "wgan_gp losses not finite");
  // Divergence would leave the output worse than the blurred input.
  o.require(wgain > 0.0, "wgan_gp gain " + fmt("%.2f dB", wgain));

  o.note("ngf " + std::to_string(cfg.ngf) + ", baseline " + fmt("%.2f dB", hinge.baseline) + "; hinge " +
         fmt("%.2f dB", hinge.final_psnr) + " (" + fmt("%+.2f", gain) + ", ssim " + fmt("%.3f", hinge.final_ssim) +
         ", " + fmt("%.0f s", hinge.secs) + "); wgan_gp " + fmt("%.2f dB", wgan.final_psnr) + " (" +
         fmt("%+.2f", wgain) + ", " + fmt("%.0f s", wgan.secs) + ")");
  return o;
}

Outcome determinism_and_persistence() {
  Outcome o;
  const auto root = scratch_dir("acceptance_persistence");
  std::filesystem::create_directories(root / "data" / "blur");
  std::filesystem::create_directories(root / "data" / "sharp");
  for (int i = 0; i < 4; ++i) {
    const Image s = synthetic_image(32, 32, 40 + i);
    const std::string name = "p" + std::to_string(i) + ".ppm";
    write_image(s, root / "data" / "sharp" / name);
    write_image(apply_blur(s, gen_motion_kernel(50 + i, 5, 6), 1.0, 60 + i), root / "data" / "blur" / name);
  }
  const auto ds = load_dataset(root / "data");
  TrainConfig cfg;
  cfg.ngf = 4;
  cfg.n_blocks = 2;
  cfg.ndf = 4;
  cfg.crop = 24;
  cfg.epochs_constant = 3;
  cfg.epochs_decay = 3;
  cfg.eval_pairs = 2;
  cfg.dropout_rate = 0.2;
  cfg.seed = 11;
  cfg.max_steps = 20;

  auto bytes = [](const std::filesystem::path& dir) {
    const auto p = output_paths(dir);
    return slurp(p.checkpoint) + "|" + slurp(p.history) + "|" + slurp(p.eval_log);
  };
  train(cfg, ds, root / "a");
  train(cfg, ds, root / "b");
  o.require(bytes(root / "a") == bytes(root / "b"), "repeat run differs");

  TrainConfig partial = cfg;
  partial.max_steps = 9;
  train(partial, ds, root / "c");
  resume(root / "c", ds, 20);
  o.require(bytes(root / "a") == bytes(root / "c"), "resumed run differs");

  const auto ckpt = load_checkpoint(output_paths(root / "a").checkpoint);
  const std::string enc = encode_checkpoint(ckpt);
  o.require(encode_checkpoint(decode_checkpoint(enc)) == enc, "round trip not lossless");
  o.require(enc == slurp(output_paths(root / "a").checkpoint), "re-encoding changes bytes");
  auto kind_of = [](const std::string& b) -> std::string {
    try {
      decode_checkpoint(b);
    } catch (const CheckpointError& e) {
      return to_string(e.kind());
    }
    return "accepted";
  };
  std::string bad_magic = enc;
  bad_magic[0] = 'X';
  std::string bad_version = enc;
  bad_version[4] = 9;
  const std::vector<std::pair<std::string, std::string>> corrupt = {
      {bad_magic, to_string(CheckpointErrorKind::BadMagic)},
      {bad_version, to_string(CheckpointErrorKind::UnsupportedVersion)},
      {enc.substr(0, enc.size() / 2), to_string(CheckpointErrorKind::TruncatedPayload)},
      {enc.substr(0, 3), to_string(CheckpointErrorKind::BadMagic)},
      {enc.substr(0, 6), to_string(CheckpointErrorKind::TruncatedPayload)},
  };
  for (const auto& [b, want] : corrupt) {
    const auto got = kind_of(b);
    o.require(got == want, "expected " + want + ", got " + got);
  }
  o.note("two runs and a resumed run give identical checkpoint, history and eval bytes; corrupt inputs rejected");
  return o;
}

Outcome schedule() {
  Outcome o;
  const TrainConfig cfg = TrainConfig::full_scale();
  for (std::size_t e = 0; e < 150; ++e)
    if (lr_at_epoch(cfg, e) != 1e-4) o.require(false, "epoch " + std::to_string(e) + " " + fmt("%g", lr_at_epoch(cfg, e)));
  o.require(std::abs(lr_at_epoch(cfg, 225) - 5e-5) < 1e-18, "epoch 225 " + fmt("%.17g", lr_at_epoch(cfg, 225)));
  o.require(lr_at_epoch(cfg, 300) == 0.0, "epoch 300 " + fmt("%g", lr_at_epoch(cfg, 300)));
  o.note("1e-4 through 149, " + fmt("%g", lr_at_epoch(cfg, 225)) + " at 225, " + fmt("%g", lr_at_epoch(cfg, 300)) +
         " at 300");
  return o;
}

Outcome discriminator_contract() {
  Outcome o;
  auto d = build_discriminator<double>(8);
  init_weights(d, 21);
  Rng rng(22);
  {
    auto big = build_discriminator<float>(64);
    init_weights(big, 21);
    NoGradGuard no_grad;
    const auto s = forward_discriminator(big, random_tensor<float>({1, 6, 256, 256}, rng));
    o.require(s.shape() == Shape{1, 1, 30, 30}, "score map " + shape_str(s.shape()));
  }
  // Score (0,0) reads input rows and columns -23..46; perturb at (100,100).
  auto x = random_tensor<double>({1, 6, 128, 128}, rng);
  auto xp = x.clone();
  xp.mutable_data()[(2 * 128 + 100) * 128 + 100] += 1.0;
  NoGradGuard no_grad;
  const double full = std::abs(forward_discriminator(d, xp).at(0) - forward_discriminator(d, x).at(0));
  LayerGraph<double> convs = d;
  std::erase_if(convs.layers, [](const Layer<double>& l) { return l.kind == LayerKind::InstanceNorm; });
  const double stack = std::abs(run_layers(convs, xp).at(0) - run_layers(convs, x).at(0));
  o.require(full < 1e-7, "full discriminator score moved by " + fmt("%.3g", full) +
                             " (instance norm couples all positions)");
  o.note("conv stack without norms moved by " + fmt("%.3g", stack));
  return o;
}

Outcome metrics() {
  Outcome o;
  const Image a = synthetic_image(48, 40, 7);
  o.require(std::isinf(psnr(a, a)) && psnr(a, a) > 0, "psnr(x,x) " + fmt("%g", psnr(a, a)));
  const Image mid(32, 32, 100);
  const double p1 = psnr(mid, clamp_add(mid, 1));
  o.require(std::abs(p1 - 48.13) <= 0.01, "uniform +1 psnr " + fmt("%.4f", p1));
  const double s = ssim(a, a);
  o.require(std::abs(s - 1.0) <= 1e-9, "ssim(x,x) " + fmt("%.17g", s));
  Image ramp(256, 1);
  for (std::size_t x = 0; x < 256; ++x)
    for (std::size_t c = 0; c < 3; ++c) ramp.at(0, x, c) = static_cast<std::uint8_t>(x);
  const auto t = normalize(ramp);
  bool exact = denormalize(t) == ramp;
  for (std::size_t x = 0; x < 256; ++x) exact = exact && t.at(x) == static_cast<float>(x / 127.5 - 1.0);
  o.require(exact, "normalize/denormalize not exact");
  o.note("psnr(x,x) inf, +1 pair " + fmt("%.4f dB", p1) + ", ssim(x,x) " + fmt("%.12g", s) +
         ", 256 values round trip");
  return o;
}

}  // namespace

// Optional arguments select criteria by number; none runs all of them.
int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"parameter counts", parameter_counts},
      {"MAC counts at 256x256", mac_counts},
      {"finite-difference gradients", gradients},
      {"oracle equivalences", oracle_equivalences},
      {"loss identities", loss_identities},
      {"training dynamics", training_dynamics},
      {"determinism and persistence", determinism_and_persistence},
      {"learning-rate schedule", schedule},
      {"discriminator contract", discriminator_contract},
      {"metrics", metrics},
  };
  std::vector<bool> selected(criteria.size(), argc == 1);
  for (int a = 1; a < argc; ++a) {
    const int n = std::atoi(argv[a]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion %s\n", argv[a]);
      return 2;
    }
    selected[n - 1] = true;
  }
  int failures = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    ++ran;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %zu %s: %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
