#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fmd/checkpoint.hpp"
#include "fmd/datakit.hpp"
#include "fmd/gradsuite.hpp"
#include "fmd/model.hpp"
#include "fmd/profiler.hpp"
#include "fmd/trainer.hpp"

namespace fs = std::filesystem;
using namespace fmd;

namespace {

enum Exit { kOk = 0, kMissing = 1, kUsage = 2, kCorrupt = 3, kVerification = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingInput(what + " not found: " + p.string());
}

std::vector<fs::path> ppm_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

LayerGraph<float> load_generator(const fs::path& path) {
  require_exists(path, "checkpoint");
  return generator_from_checkpoint(load_checkpoint(path));
}

// ---- profile

struct ProfileArgs {
  std::size_t ngf = 64;
  std::size_t n_blocks = 9;
  std::string decomposition = "ResOnly";
  std::string resolution = "256x256";
  std::string json;
};

int cmd_profile(const ProfileArgs& a) {
  const auto x = a.resolution.find('x');
  std::size_t h = 0, w = 0;
  try {
    if (x == std::string::npos) throw std::invalid_argument("");
    std::size_t used = 0;
    h = std::stoul(a.resolution.substr(0, x), &used);
    if (used != x) throw std::invalid_argument("");
    w = std::stoul(a.resolution.substr(x + 1), &used);
    if (used != a.resolution.size() - x - 1) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw UsageError("--resolution expects HxW, e.g. 256x256, got '" + a.resolution + "'");
  }
  if (h == 0 || w == 0 || h % 4 || w % 4) throw UsageError("--resolution must be positive multiples of 4");
  GeneratorConfig cfg{a.ngf, a.n_blocks, Decomposition::ResOnly, 0.0};
  try {
    cfg.decomposition = parse_decomposition(a.decomposition);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto report = count_macs(build_generator<float>(cfg), h, w);
  std::cout << "layer\tkind\tparams\tmacs\n";
  for (const auto& l : report.layers) std::cout << l.name << '\t' << l.kind << '\t' << l.params << '\t' << l.macs << '\n';
  std::cout << "total_params\t" << report.total_params << "\ntotal_macs\t" << report.total_macs << '\n';
  if (!a.json.empty()) {
    if (a.json == "-") {
      std::cout << report_json(report);
    } else {
      std::ofstream(a.json) << report_json(report);
    }
  }
  return kOk;
}

// ---- synth

struct SynthArgs {
  std::string src;
  std::string out;
  std::size_t generate = 0;
  std::size_t size = 64;
  std::size_t kernel_size = 15;
  std::size_t kernel_steps = 0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  if (a.kernel_size % 2 == 0) throw UsageError("--kernel-size must be odd");
  std::vector<std::pair<std::string, Image>> sharp;
  if (a.generate > 0) {
    if (!a.src.empty()) throw UsageError("--src and --generate are exclusive");
    for (std::size_t i = 0; i < a.generate; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "synth_%04zu.ppm", i);
      sharp.emplace_back(name, synthetic_image(a.size, a.size, a.seed * 1000003 + i));
    }
  } else {
    if (a.src.empty()) throw UsageError("synth needs --src or --generate");
    require_exists(a.src, "source directory");
    for (const auto& p : ppm_files(a.src)) sharp.emplace_back(p.filename().string(), read_image(p));
    if (sharp.empty()) throw MissingInput("no .ppm images in " + a.src);
  }
  fs::create_directories(fs::path(a.out) / "blur");
  fs::create_directories(fs::path(a.out) / "sharp");
  Rng rng(a.seed);
  for (const auto& [name, img] : sharp) {
    const std::uint64_t kernel_seed = rng.next_u64(), noise_seed = rng.next_u64();
    const BlurKernel kernel =
        a.kernel_size == 1 ? BlurKernel{}
                           : gen_motion_kernel(kernel_seed, a.kernel_size, a.kernel_steps ? a.kernel_steps : a.kernel_size);
    write_image(img, fs::path(a.out) / "sharp" / name);
    write_image(apply_blur(img, kernel, a.noise_sigma, noise_seed), fs::path(a.out) / "blur" / name);
  }
  std::cout << "pairs\t" << sharp.size() << "\nout\t" << a.out << '\n';
  return kOk;
}

// ---- train

struct TrainArgs {
  std::string data;
  std::string split = "train";
  std::string out;
  std::string config;
  std::string finetune;
  bool resume = false;
  std::map<std::string, std::string> overrides;
};

int cmd_train(const TrainArgs& a) {
  require_exists(a.data, "dataset");
  const auto dataset = load_dataset(a.data, a.split);
  for (const auto& w : dataset.warnings) std::cerr << "warning: " << w << '\n';
  if (dataset.size() == 0) throw MissingInput("dataset " + a.data + " has no image pairs");

  TrainState state;
  if (a.resume) {
    for (const auto& [k, v] : a.overrides)
      if (k != "max_steps") throw UsageError("--resume only accepts --max-steps; the configuration is in the checkpoint");
    if (!a.config.empty() || !a.finetune.empty()) throw UsageError("--resume cannot be combined with --config or --finetune");
    require_exists(output_paths(a.out).checkpoint, "checkpoint");
    const std::size_t max_steps = a.overrides.count("max_steps") ? std::stoul(a.overrides.at("max_steps")) : 0;
    state = resume(a.out, dataset, max_steps);
  } else {
    TrainConfig cfg;
    try {
      if (!a.config.empty()) {
        require_exists(a.config, "config file");
        cfg = read_config_file(a.config, cfg);
      }
      for (const auto& [k, v] : a.overrides) cfg.set(k, v);
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (!a.finetune.empty()) {
      require_exists(a.finetune, "checkpoint");
      state = fine_tune(load_checkpoint(a.finetune), dataset, cfg, a.out);
    } else {
      state = train(cfg, dataset, a.out);
    }
  }
  const auto paths = output_paths(a.out);
  std::cout << "steps\t" << state.step << "\nepoch\t" << state.epoch << "\ncheckpoint\t" << paths.checkpoint.string()
            << "\nhistory\t" << paths.history.string() << '\n';
  return kOk;
}

// ---- infer

struct InferArgs {
  std::string checkpoint;
  std::string input;
  std::string output;
};

int cmd_infer(const InferArgs& a) {
  const auto g = load_generator(a.checkpoint);
  require_exists(a.input, "input");
  if (fs::is_directory(a.input)) {
    fs::create_directories(a.output);
    std::size_t n = 0;
    for (const auto& p : ppm_files(a.input)) {
      write_image(deblur_image(g, read_image(p)), fs::path(a.output) / p.filename());
      ++n;
    }
    std::cout << "images\t" << n << '\n';
  } else {
    const Image in = read_image(a.input);
    const Image out = deblur_image(g, in);
    write_image(out, a.output);
    std::cout << "output\t" << a.output << "\nsize\t" << out.width << 'x' << out.height << '\n';
  }
  return kOk;
}

// ---- eval

struct EvalArgs {
  std::string data;
  std::string split = "test";
  std::string checkpoint;
  std::size_t limit = 0;
};

int cmd_eval(const EvalArgs& a) {
  require_exists(a.data, "dataset");
  std::optional<LayerGraph<float>> g;
  if (!a.checkpoint.empty()) g = load_generator(a.checkpoint);
  const auto dataset = load_dataset(a.data, a.split);
  for (const auto& w : dataset.warnings) std::cerr << "warning: " << w << '\n';
  if (dataset.size() == 0) throw MissingInput("dataset " + a.data + " has no image pairs");
  const auto r = evaluate(g ? &*g : nullptr, dataset, a.limit);
  std::cout << "pairs\t" << r.count << "\npsnr\t" << r.psnr << "\nssim\t" << r.ssim << '\n';
  return kOk;
}

// ---- gradcheck

struct GradArgs {
  int precision = 64;
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  bool skip_composed = false;
};

template <typename T>
int report_suite(const GradArgs& a) {
  const auto cases = run_grad_suite<T>(GradSuiteOptions{a.trials, a.seed, !a.skip_composed});
  const double tol = grad_suite_tolerance<T>();
  double worst = 0.0;
  std::cout << "case\tinstances\tmax_rel_error\n";
  for (const auto& c : cases) {
    std::cout << c.name << '\t' << c.instances << '\t' << c.worst << '\n';
    worst = std::max(worst, c.worst);
  }
  const bool ok = worst < tol;
  std::cout << "worst\t" << worst << "\ntolerance\t" << tol << "\nresult\t" << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? kOk : kVerification;
}

int cmd_gradcheck(const GradArgs& a) {
  if (a.precision == 64) return report_suite<double>(a);
  if (a.precision == 32) return report_suite<float>(a);
  throw UsageError("--precision must be 32 or 64");
}

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mobile motion-deblurring toolkit"};
  app.require_subcommand(1);

  ProfileArgs profile;
  auto* p = app.add_subcommand("profile", "Parameter and MAC counts per generator layer");
  p->add_option("--ngf", profile.ngf, "First-layer width")->capture_default_str();
  p->add_option("--n-blocks", profile.n_blocks, "Residual blocks")->capture_default_str();
  p->add_option("--decomposition", profile.decomposition, "ResOnly, DownAndRes or UpAndRes")->capture_default_str();
  p->add_option("--resolution", profile.resolution, "HxW")->capture_default_str();
  p->add_option("--json", profile.json, "Also write the report as JSON ('-' for stdout)");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Blur sharp images into a paired blur/sharp dataset");
  s->add_option("--src", synth.src, "Directory of sharp .ppm images");
  s->add_option("--generate", synth.generate, "Generate this many procedural sharp images instead");
  s->add_option("--size", synth.size, "Side of generated images")->capture_default_str();
  s->add_option("--out", synth.out, "Output root")->required();
  s->add_option("--kernel-size", synth.kernel_size, "Odd kernel side; 1 disables blur")->capture_default_str();
  s->add_option("--kernel-steps", synth.kernel_steps, "Trajectory points (default: kernel size)");
  s->add_option("--noise-sigma", synth.noise_sigma, "Gaussian noise in 8-bit units")->capture_default_str();
  s->add_option("--seed", synth.seed)->capture_default_str();

  TrainArgs train_args;
  std::map<std::string, std::string> train_values;
  auto* t = app.add_subcommand("train", "Adversarial training; flags override the config file");
  t->add_option("--data", train_args.data, "Dataset root")->required();
  t->add_option("--split", train_args.split)->capture_default_str();
  t->add_option("--out", train_args.out, "Output directory")->required();
  t->add_option("--config", train_args.config, "File of key = value lines");
  t->add_option("--finetune", train_args.finetune, "Pretrained checkpoint to continue on this dataset");
  t->add_flag("--resume", train_args.resume, "Continue from the checkpoint in --out");
  for (const auto& [key, value] : TrainConfig{}.to_pairs()) {
    t->add_option(flag_name(key), train_values[key], "default " + value);
  }

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Deblur an image or a directory of images");
  i->add_option("--checkpoint", infer.checkpoint)->required();
  i->add_option("--input", infer.input)->required();
  i->add_option("--output", infer.output)->required();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Mean PSNR/SSIM over a paired folder");
  e->add_option("--data", eval.data)->required();
  e->add_option("--split", eval.split)->capture_default_str();
  e->add_option("--checkpoint", eval.checkpoint, "Omit to score the blurred images directly");
  e->add_option("--limit", eval.limit, "Only the first N pairs (0 = all)")->capture_default_str();

  GradArgs gradargs;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference verification of every gradient");
  g->add_option("--precision", gradargs.precision, "32 or 64")->capture_default_str();
  g->add_option("--trials", gradargs.trials, "Random instances per case")->capture_default_str();
  g->add_option("--seed", gradargs.seed)->capture_default_str();
  g->add_flag("--skip-composed", gradargs.skip_composed, "Leave out the composed networks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*p) return cmd_profile(profile);
    if (*s) return cmd_synth(synth);
    if (*t) {
      for (const auto& [key, value] : train_values)
        if (t->count(flag_name(key))) train_args.overrides[key] = value;
      return cmd_train(train_args);
    }
    if (*i) return cmd_infer(infer);
    if (*e) return cmd_eval(eval);
    if (*g) return cmd_gradcheck(gradargs);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kUsage;
  } catch (const MissingInput& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kMissing;
  } catch (const CheckpointError& err) {
    std::cerr << "corrupt checkpoint (" << to_string(err.kind()) << "): " << err.what() << '\n';
    return err.kind() == CheckpointErrorKind::Io ? kMissing : kCorrupt;
  } catch (const ImageFormatError& err) {
    std::cerr << "corrupt image: " << err.what() << '\n';
    return kCorrupt;
  } catch (const ArchitectureMismatch& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kCorrupt;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kMissing;
  }
  return kUsage;
}
