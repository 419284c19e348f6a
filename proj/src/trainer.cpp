#include "fmd/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <system_error>

#include "fmd/ops.hpp"

namespace fmd {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + text + "'");
  }
  return v;
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& text) {
  U v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + text + "'");
  }
  return v;
}

// Calls f(name, field) for every config field in declaration order.
template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("adam_eps", c.adam_eps);
  f("epochs_constant", c.epochs_constant);
  f("epochs_decay", c.epochs_decay);
  f("batch", c.batch);
  f("lambda_content", c.lambda_content);
  f("d_steps_per_g", c.d_steps_per_g);
  f("adv_loss", c.adv_loss);
  f("gp_lambda", c.gp_lambda);
  f("crop", c.crop);
  f("seed", c.seed);
  f("dropout_rate", c.dropout_rate);
  f("ngf", c.ngf);
  f("n_blocks", c.n_blocks);
  f("decomposition", c.decomposition);
  f("ndf", c.ndf);
  f("feature_net", c.feature_net);
  f("max_steps", c.max_steps);
  f("checkpoint_every", c.checkpoint_every);
  f("eval_pairs", c.eval_pairs);
}

std::string field_text(double v) { return format_double(v); }
std::string field_text(std::size_t v) { return std::to_string(v); }
std::string field_text(const std::string& v) { return v; }
std::string field_text(AdvLoss v) { return to_string(v); }
std::string field_text(Decomposition v) { return to_string(v); }

void field_parse(const std::string& key, const std::string& text, double& out) { out = parse_double(key, text); }
void field_parse(const std::string& key, const std::string& text, std::size_t& out) {
  out = parse_unsigned<std::size_t>(key, text);
}
void field_parse(const std::string&, const std::string& text, std::string& out) { out = text; }
void field_parse(const std::string&, const std::string& text, AdvLoss& out) { out = parse_adv_loss(text); }
void field_parse(const std::string&, const std::string& text, Decomposition& out) {
  out = parse_decomposition(text);
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    out.push_back(text.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void malformed(const std::string& what) {
  throw CheckpointError(CheckpointErrorKind::Malformed, "training checkpoint: " + what);
}

std::string required_meta(const Checkpoint& ckpt, const std::string& key) {
  if (!ckpt.has_meta(key)) malformed("missing metadata key '" + key + "'");
  return ckpt.meta_value(key);
}

TrainConfig config_from_meta(const Checkpoint& ckpt) {
  TrainConfig cfg;
  bool any = false;
  for (const auto& [k, v] : ckpt.meta) {
    if (!k.starts_with("cfg.")) continue;
    any = true;
    try {
      cfg.set(k.substr(4), v);
    } catch (const std::invalid_argument& e) {
      malformed(e.what());
    }
  }
  if (!any) malformed("no configuration snapshot");
  return cfg;
}

FeatureNet<float> make_feature_net(const TrainConfig& cfg) {
  if (cfg.feature_net == "builtin") return builtin_tiny_featurenet(0);
  return load_feature_net(cfg.feature_net);
}

// Copies prefix/<name> tensors into the graph, listing every mismatch.
void load_weights(LayerGraph<float>& graph, const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<std::string> problems;
  for (auto& [name, param] : graph.named_parameters()) {
    const auto* t = ckpt.find(prefix + name);
    if (!t) {
      problems.push_back(prefix + name + " missing (model " + shape_str(param.shape()) + ")");
      continue;
    }
    if (t->shape() != param.shape()) {
      problems.push_back(prefix + name + " " + shape_str(t->shape()) + " vs model " + shape_str(param.shape()));
      continue;
    }
    std::copy(t->data().begin(), t->data().end(), param.mutable_data().begin());
  }
  const auto expected = graph.named_parameters();
  for (const auto& [name, t] : ckpt.tensors) {
    if (!name.starts_with(prefix)) continue;
    const auto rest = name.substr(prefix.size());
    const bool known = std::any_of(expected.begin(), expected.end(), [&](const auto& p) { return p.first == rest; });
    if (!known) problems.push_back(name + " " + shape_str(t.shape()) + " not in model");
  }
  if (!problems.empty()) {
    std::string msg = "architecture mismatch:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ArchitectureMismatch(msg);
  }
}

void load_moments(AdamState& opt, const LayerGraph<float>& graph, const Checkpoint& ckpt, const std::string& tag) {
  opt.m.clear();
  opt.v.clear();
  for (const auto& [name, param] : graph.named_parameters()) {
    const auto* m = ckpt.find(tag + ".m/" + name);
    const auto* v = ckpt.find(tag + ".v/" + name);
    if (!m || !v) malformed("missing optimizer moments for " + name);
    if (m->shape() != param.shape() || v->shape() != param.shape()) malformed("moment shape mismatch for " + name);
    opt.m.push_back(m->clone());
    opt.v.push_back(v->clone());
  }
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("train_step: non-finite ") + what);
}

struct GeneratorObjective {
  Tensor<float> adv, content, total;
};

GeneratorObjective generator_objective(TrainState& s, const Tensor<float>& blurred, const Tensor<float>& restored,
                                       const Tensor<float>& sharp) {
  s.discriminator.set_requires_grad(false);
  GeneratorObjective o;
  o.adv = hinge_g_loss(forward_discriminator(s.discriminator, concat_channels(blurred, restored)));
  s.discriminator.set_requires_grad(true);
  o.content = perceptual_loss(s.features, restored, sharp);
  o.total = total_g_loss(o.adv, o.content, static_cast<float>(s.cfg.lambda_content));
  return o;
}

std::vector<Tensor<float>> tensors_of(const std::vector<std::pair<std::string, Tensor<float>>>& named) {
  std::vector<Tensor<float>> out;
  out.reserve(named.size());
  for (const auto& p : named) out.push_back(p.second);
  return out;
}

Tensor<float> batch_tensor(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return normalize_batch(ptrs);
}

std::string dataset_id(const DatasetIndex& d) { return d.dir.lexically_normal().generic_string(); }

// Keeps the header and rows whose leading step is at most `step`.
void truncate_log(const std::filesystem::path& path, std::uint64_t step, std::size_t step_column) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    const auto fields = split(line, '\t');
    if (fields.size() <= step_column) continue;
    std::uint64_t row_step = 0;
    const auto& f = fields[step_column];
    const auto res = std::from_chars(f.data(), f.data() + f.size(), row_step);
    if (res.ec != std::errc() || row_step <= step) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

void open_log(std::ofstream& out, const std::filesystem::path& path, const char* header) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out.open(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if (fresh) out << header << '\n';
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string to_string(AdvLoss loss) { return loss == AdvLoss::Hinge ? "hinge" : "wgan_gp"; }

AdvLoss parse_adv_loss(std::string_view text) {
  if (text == "hinge") return AdvLoss::Hinge;
  if (text == "wgan_gp") return AdvLoss::WganGp;
  throw std::invalid_argument("unknown adversarial loss '" + std::string(text) + "' (expected hinge or wgan_gp)");
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.epochs_constant = 150;
  c.epochs_decay = 150;
  c.crop = 256;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (batch == 0) fail("batch must be positive");
  if (d_steps_per_g == 0) fail("d_steps_per_g must be positive");
  if (!(lambda_content >= 0.0)) fail("lambda_content must be >= 0");
  if (!(gp_lambda >= 0.0)) fail("gp_lambda must be >= 0");
  // The 70x70 PatchGAN emits floor(H/8)-2 scores per side.
  if (crop < 24 || crop % 4 != 0) fail("crop must be a multiple of 4 and at least 24");
  generator().validate();
  if (ndf == 0) fail("ndf must be positive");
  if (feature_net.empty()) fail("feature_net must be 'builtin' or a path");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_pairs() const {
  std::vector<std::pair<std::string, std::string>> out;
  TrainConfig copy = *this;
  visit_fields(copy, [&](const char* name, auto& field) { out.emplace_back(name, field_text(field)); });
  return out;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  visit_fields(*this, [&](const char* name, auto& field) {
    if (key == name) {
      field_parse(key, value, field);
      found = true;
    }
  });
  if (!found) throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig read_config_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      base.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

void adam_step(const std::vector<std::pair<std::string, Tensor<float>>>& params,
               const std::vector<Tensor<float>>& grads, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " parameters but " +
                                std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty() && state.v.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.shape(), 0.0f);
      state.v.emplace_back(p.shape(), 0.0f);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                                " tensors for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (grads[i].shape() != p.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape()) {
      throw ShapeError("adam_step: shape mismatch for " + name);
    }
    for (float g : grads[i].data()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> p = params[i].second;
    auto pd = p.mutable_data();
    auto md = state.m[i].mutable_data();
    auto vd = state.v[i].mutable_data();
    const auto gd = grads[i].data();
    for (std::size_t j = 0; j < pd.size(); ++j) {
      const double g = gd[j];
      const double m = beta1 * md[j] + (1.0 - beta1) * g;
      const double v = beta2 * vd[j] + (1.0 - beta2) * g * g;
      md[j] = static_cast<float>(m);
      vd[j] = static_cast<float>(v);
      pd[j] = static_cast<float>(pd[j] - lr * (m / c1) / (std::sqrt(v / c2) + eps));
    }
  }
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  const std::size_t total = cfg.total_epochs();
  if (epoch > total) {
    throw std::out_of_range("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(total) + "]");
  }
  if (epoch < cfg.epochs_constant) return cfg.lr;
  if (cfg.epochs_decay == 0) return 0.0;
  return cfg.lr * static_cast<double>(total - epoch) / static_cast<double>(cfg.epochs_decay);
}

TrainState init_training(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  s.generator = build_generator<float>(cfg.generator());
  s.discriminator = build_discriminator<float>(cfg.ndf);
  init_weights(s.generator, cfg.seed);
  init_weights(s.discriminator, cfg.seed + 1);
  s.features = make_feature_net(cfg);
  s.rng = Rng(cfg.seed + 2);
  return s;
}

std::vector<Tensor<float>> generator_gradients(TrainState& state, const Tensor<float>& blurred,
                                               const Tensor<float>& sharp, StepLosses* losses) {
  const auto restored = forward_generator(state.generator, blurred, RunOptions{true, &state.rng});
  const auto o = generator_objective(state, blurred, restored, sharp);
  if (losses) {
    losses->g_adv = o.adv.item();
    losses->g_content = o.content.item();
    losses->g_total = o.total.item();
  }
  return grad(o.total, tensors_of(state.generator.named_parameters()));
}

StepLosses train_step(TrainState& s, const Tensor<float>& blurred, const Tensor<float>& sharp, double lr) {
  StepLosses out;
  const auto g_params = s.generator.named_parameters();
  const auto d_params = s.discriminator.named_parameters();
  const auto restored = forward_generator(s.generator, blurred, RunOptions{true, &s.rng});
  const auto real_pair = concat_channels(blurred, sharp);
  const auto fake_pair = concat_channels(blurred, restored.detach());

  for (std::size_t k = 0; k < s.cfg.d_steps_per_g; ++k) {
    Tensor<float> d_loss;
    if (s.cfg.adv_loss == AdvLoss::Hinge) {
      d_loss = hinge_d_loss(forward_discriminator(s.discriminator, real_pair),
                            forward_discriminator(s.discriminator, fake_pair));
    } else {
      d_loss = wgan_gp_d_loss(s.discriminator, real_pair, fake_pair, GpConfig{s.cfg.gp_lambda, 0}, s.rng);
    }
    out.d_loss = d_loss.item();
    check_finite(out.d_loss, "discriminator loss");
    if (s.freeze_discriminator) break;
    adam_step(d_params, grad(d_loss, tensors_of(d_params)), s.d_opt, lr, s.cfg.beta1, s.cfg.beta2, s.cfg.adam_eps);
  }

  const auto o = generator_objective(s, blurred, restored, sharp);
  out.g_adv = o.adv.item();
  out.g_content = o.content.item();
  out.g_total = o.total.item();
  check_finite(out.g_total, "generator loss");
  adam_step(g_params, grad(o.total, tensors_of(g_params)), s.g_opt, lr, s.cfg.beta1, s.cfg.beta2, s.cfg.adam_eps);
  return out;
}

Image deblur_image(const LayerGraph<float>& generator, const Image& blurred) {
  if (blurred.width == 0 || blurred.height == 0) throw std::invalid_argument("deblur_image: empty image");
  auto target = [](std::size_t n) { return std::max<std::size_t>(8, (n + 3) / 4 * 4); };
  const std::size_t w = target(blurred.width), h = target(blurred.height);
  // Mirror without repeating the edge, periodically for pads wider than the image.
  auto mirror = [](std::size_t i, std::size_t n) {
    if (n == 1) return std::size_t{0};
    const std::size_t period = 2 * (n - 1);
    const std::size_t r = i % period;
    return r < n ? r : period - r;
  };
  Image padded(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        padded.at(y, x, c) = blurred.at(mirror(y, blurred.height), mirror(x, blurred.width), c);
  NoGradGuard no_grad;
  const Image restored = denormalize(forward_generator(generator, normalize(padded)));
  return crop(restored, 0, 0, blurred.height, blurred.width);
}

EvalResult evaluate(const LayerGraph<float>* generator, const DatasetIndex& dataset, std::size_t limit,
                    std::size_t center_crop) {
  EvalResult r;
  const std::size_t n = limit == 0 ? dataset.size() : std::min(limit, dataset.size());
  for (std::size_t i = 0; i < n; ++i) {
    auto pair = dataset.load(i);
    if (center_crop > 0) {
      const std::size_t ch = std::min(center_crop, pair.sharp.height), cw = std::min(center_crop, pair.sharp.width);
      const std::size_t y0 = (pair.sharp.height - ch) / 2, x0 = (pair.sharp.width - cw) / 2;
      pair.blurred = crop(pair.blurred, y0, x0, ch, cw);
      pair.sharp = crop(pair.sharp, y0, x0, ch, cw);
    }
    const Image out = generator ? deblur_image(*generator, pair.blurred) : pair.blurred;
    r.psnr += psnr(out, pair.sharp);
    r.ssim += ssim(out, pair.sharp);
    ++r.count;
  }
  if (r.count > 0) {
    r.psnr /= static_cast<double>(r.count);
    r.ssim /= static_cast<double>(r.count);
  }
  return r;
}

Checkpoint to_checkpoint(const TrainState& s) {
  Checkpoint c;
  const auto g = s.generator.named_parameters();
  const auto d = s.discriminator.named_parameters();
  for (const auto& [n, t] : g) c.tensors.emplace_back("G/" + n, t.detach());
  for (const auto& [n, t] : d) c.tensors.emplace_back("D/" + n, t.detach());
  auto moments = [&](const AdamState& opt, const std::vector<std::pair<std::string, Tensor<float>>>& names,
                     const std::string& tag) {
    if (opt.m.empty()) return;
    for (std::size_t i = 0; i < names.size(); ++i) c.tensors.emplace_back(tag + ".m/" + names[i].first, opt.m[i].clone());
    for (std::size_t i = 0; i < names.size(); ++i) c.tensors.emplace_back(tag + ".v/" + names[i].first, opt.v[i].clone());
  };
  moments(s.g_opt, g, "adamG");
  moments(s.d_opt, d, "adamD");
  c.set_meta("kind", "train-state");
  c.set_meta("step", std::to_string(s.step));
  c.set_meta("epoch", std::to_string(s.epoch));
  c.set_meta("position", std::to_string(s.position));
  std::vector<std::string> order;
  for (auto i : s.order) order.push_back(std::to_string(i));
  c.set_meta("order", join(order, ','));
  c.set_meta("rng", s.rng.state());
  c.set_meta("adamG.step", std::to_string(s.g_opt.step));
  c.set_meta("adamD.step", std::to_string(s.d_opt.step));
  c.set_meta("provenance", join(s.provenance, ';'));
  for (const auto& [k, v] : s.cfg.to_pairs()) c.set_meta("cfg." + k, v);
  return c;
}

LayerGraph<float> generator_from_checkpoint(const Checkpoint& ckpt) {
  const TrainConfig cfg = config_from_meta(ckpt);
  auto g = build_generator<float>(cfg.generator());
  load_weights(g, ckpt, "G/");
  g.set_requires_grad(false);
  return g;
}

TrainState from_checkpoint(const Checkpoint& ckpt) {
  TrainState s;
  s.cfg = config_from_meta(ckpt);
  try {
    s.cfg.validate();
  } catch (const std::invalid_argument& e) {
    malformed(e.what());
  }
  s.generator = build_generator<float>(s.cfg.generator());
  s.discriminator = build_discriminator<float>(s.cfg.ndf);
  load_weights(s.generator, ckpt, "G/");
  load_weights(s.discriminator, ckpt, "D/");
  s.features = make_feature_net(s.cfg);
  auto number = [&](const std::string& key) {
    const auto text = required_meta(ckpt, key);
    try {
      return parse_unsigned<std::uint64_t>(key, text);
    } catch (const std::invalid_argument& e) {
      malformed(e.what());
    }
  };
  s.step = number("step");
  s.epoch = number("epoch");
  s.position = number("position");
  s.g_opt.step = number("adamG.step");
  s.d_opt.step = number("adamD.step");
  if (s.g_opt.step > 0) load_moments(s.g_opt, s.generator, ckpt, "adamG");
  if (s.d_opt.step > 0) load_moments(s.d_opt, s.discriminator, ckpt, "adamD");
  for (const auto& item : split(required_meta(ckpt, "order"), ',')) {
    try {
      s.order.push_back(parse_unsigned<std::size_t>("order", item));
    } catch (const std::invalid_argument& e) {
      malformed(e.what());
    }
  }
  try {
    s.rng.set_state(required_meta(ckpt, "rng"));
  } catch (const std::invalid_argument& e) {
    malformed(e.what());
  }
  s.provenance = split(ckpt.meta_value("provenance"), ';');
  return s;
}

TrainOutputs output_paths(const std::filesystem::path& out_dir) {
  return {out_dir / "checkpoint.fmdc", out_dir / "history.tsv", out_dir / "eval.tsv"};
}

void run_training(TrainState& s, const DatasetIndex& dataset, const std::filesystem::path& out_dir) {
  const std::size_t n = dataset.size();
  if (n == 0) throw std::invalid_argument("train: dataset " + dataset_id(dataset) + " has no image pairs");
  if (!s.order.empty() && s.order.size() != n) {
    throw std::invalid_argument("train: checkpoint expects " + std::to_string(s.order.size()) +
                                " pairs but the dataset has " + std::to_string(n));
  }
  std::filesystem::create_directories(out_dir);
  const auto paths = output_paths(out_dir);
  std::ofstream history, eval_log;
  open_log(history, paths.history, "step\td_loss\tg_adv\tg_content\tg_total\tlr");
  open_log(eval_log, paths.eval_log, "epoch\tstep\tpsnr\tssim");

  auto reshuffle = [&] {
    s.order.resize(n);
    std::iota(s.order.begin(), s.order.end(), std::size_t{0});
    s.rng.shuffle(s.order);
  };
  if (s.order.empty()) reshuffle();

  const std::size_t steps_per_epoch = (n + s.cfg.batch - 1) / s.cfg.batch;
  const std::uint64_t schedule_end = static_cast<std::uint64_t>(steps_per_epoch) * s.cfg.total_epochs();
  const std::uint64_t end = s.cfg.max_steps > 0 ? std::min<std::uint64_t>(schedule_end, s.cfg.max_steps) : schedule_end;
  std::uint64_t saved_step = s.step;
  bool have_saved = std::filesystem::exists(paths.checkpoint);

  auto save = [&] {
    save_checkpoint(to_checkpoint(s), paths.checkpoint);
    saved_step = s.step;
    have_saved = true;
  };

  while (s.step < end && s.epoch < s.cfg.total_epochs()) {
    std::vector<Image> blurs, sharps;
    const std::size_t take = std::min(s.cfg.batch, n - s.position);
    for (std::size_t b = 0; b < take; ++b) {
      const auto pair = dataset.load(s.order[s.position + b]);
      if (pair.sharp.width < s.cfg.crop || pair.sharp.height < s.cfg.crop) {
        throw std::invalid_argument("train: pair " + pair.id + " is smaller than the " + std::to_string(s.cfg.crop) +
                                    " pixel crop");
      }
      auto cropped = random_crop_pair(pair, s.cfg.crop, s.rng);
      blurs.push_back(std::move(cropped.blurred));
      sharps.push_back(std::move(cropped.sharp));
    }
    const double lr = lr_at_epoch(s.cfg, s.epoch);
    StepLosses losses;
    try {
      losses = train_step(s, batch_tensor(blurs), batch_tensor(sharps), lr);
    } catch (const NumericError& e) {
      const std::string where = have_saved ? paths.checkpoint.string() + " (step " + std::to_string(saved_step) + ")"
                                           : std::string("none written yet");
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(s.step + 1) +
                         "; last good checkpoint: " + where);
    }
    ++s.step;
    s.position += take;
    history << s.step << '\t' << fmt(losses.d_loss) << '\t' << fmt(losses.g_adv) << '\t' << fmt(losses.g_content)
            << '\t' << fmt(losses.g_total) << '\t' << fmt(lr) << '\n';
    if (s.position >= n) {
      if (s.cfg.eval_pairs > 0) {
        const auto r = evaluate(&s.generator, dataset, s.cfg.eval_pairs, s.cfg.crop);
        eval_log << s.epoch << '\t' << s.step << '\t' << fmt(r.psnr) << '\t' << fmt(r.ssim) << '\n';
      }
      ++s.epoch;
      s.position = 0;
      reshuffle();
    }
    if (!history || !eval_log) {
      save();
      throw std::runtime_error("train: failed writing logs under " + out_dir.string() + "; checkpoint saved");
    }
    if (s.cfg.checkpoint_every > 0 && s.step % s.cfg.checkpoint_every == 0) {
      history.flush();
      eval_log.flush();
      save();
    }
  }
  history.flush();
  eval_log.flush();
  if (!have_saved || saved_step != s.step) save();
}

TrainState train(const TrainConfig& cfg, const DatasetIndex& dataset, const std::filesystem::path& out_dir) {
  TrainState s = init_training(cfg);
  s.provenance.push_back(dataset_id(dataset));
  const auto paths = output_paths(out_dir);
  std::filesystem::remove(paths.history);
  std::filesystem::remove(paths.eval_log);
  std::filesystem::remove(paths.checkpoint);
  run_training(s, dataset, out_dir);
  return s;
}

TrainState resume(const std::filesystem::path& out_dir, const DatasetIndex& dataset, std::size_t max_steps) {
  const auto paths = output_paths(out_dir);
  TrainState s = from_checkpoint(load_checkpoint(paths.checkpoint));
  if (max_steps > 0) s.cfg.max_steps = max_steps;
  truncate_log(paths.history, s.step, 0);
  truncate_log(paths.eval_log, s.step, 1);
  run_training(s, dataset, out_dir);
  return s;
}

TrainState fine_tune(const Checkpoint& pretrained, const DatasetIndex& dataset, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir) {
  TrainState s = init_training(cfg);
  load_weights(s.generator, pretrained, "G/");
  load_weights(s.discriminator, pretrained, "D/");
  s.provenance = split(pretrained.meta_value("provenance"), ';');
  s.provenance.push_back(dataset_id(dataset));
  const auto paths = output_paths(out_dir);
  std::filesystem::remove(paths.history);
  std::filesystem::remove(paths.eval_log);
  std::filesystem::remove(paths.checkpoint);
  run_training(s, dataset, out_dir);
  return s;
}

}  // namespace fmd
