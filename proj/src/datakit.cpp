#include "fmd/datakit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

namespace fmd {

namespace {

std::uint8_t to_byte(double v) {
  const double r = std::round(v);  // half away from zero
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

// Mirror index without repeating the edge sample.
std::size_t reflect_index(long i, std::size_t n) {
  const long m = static_cast<long>(n);
  if (m == 1) return 0;
  const long period = 2 * (m - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < m ? i : period - i);
}

}  // namespace

Image decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ImageFormatError("not a binary PPM (expected \"P6\")", 0);
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw ImageFormatError(std::string("PPM ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ImageFormatError(std::string("PPM: expected ") + what, start);
    return v;
  };
  const std::size_t w = number("width");
  const std::size_t h = number("height");
  const std::size_t maxval_at = pos;
  const std::size_t maxval = number("maxval");
  if (w == 0 || h == 0) throw ImageFormatError("PPM: zero image dimension", maxval_at);
  if (maxval != 255) throw ImageFormatError("PPM: maxval " + std::to_string(maxval) + " unsupported (need 255)", maxval_at);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ImageFormatError("PPM: expected a single whitespace byte after maxval", pos);
  }
  ++pos;
  const std::size_t need = w * h * 3;
  if (bytes.size() - pos < need) {
    throw ImageFormatError("PPM: pixel data truncated, need " + std::to_string(need) + " bytes, have " +
                               std::to_string(bytes.size() - pos),
                           bytes.size());
  }
  Image img(w, h);
  std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos), need, img.pixels.begin());
  return img;
}

std::string encode_ppm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const ImageFormatError& e) {
    throw ImageFormatError(path.string() + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" at byte")),
                           e.offset());
  }
}

void write_image(const Image& image, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write image " + path.string());
  const std::string bytes = encode_ppm(image);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

BlurKernel gen_motion_kernel(std::uint64_t seed, std::size_t size, std::size_t steps) {
  if (size < 3 || size % 2 == 0) throw std::invalid_argument("motion kernel size must be odd and >= 3");
  if (steps == 0) throw std::invalid_argument("motion kernel needs at least one step");
  Rng rng(seed);
  const double extent = static_cast<double>(size - 1);
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  if (steps > 1) {
    // Smooth random walk whose total length spans most of the grid.
    const double step_len = extent / static_cast<double>(steps - 1);
    double angle = rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t s = 1; s < steps; ++s) {
      angle += rng.normal(0.0, 0.5);
      const double len = step_len * rng.uniform(0.5, 1.0);
      pts.emplace_back(pts.back().first + len * std::cos(angle), pts.back().second + len * std::sin(angle));
    }
  }
  double cx = 0.0, cy = 0.0;
  for (const auto& [x, y] : pts) {
    cx += x;
    cy += y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  const double centre = extent / 2.0;
  for (auto& [x, y] : pts) {
    x = std::clamp(x - cx + centre, 0.0, extent);
    y = std::clamp(y - cy + centre, 0.0, extent);
  }

  BlurKernel k;
  k.size = size;
  k.weights.assign(size * size, 0.0);
  auto splat = [&](double x, double y, double w) {
    const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    const std::size_t x1 = std::min(x0 + 1, size - 1), y1 = std::min(y0 + 1, size - 1);
    k.weights[y0 * size + x0] += w * (1 - fx) * (1 - fy);
    k.weights[y0 * size + x1] += w * fx * (1 - fy);
    k.weights[y1 * size + x0] += w * (1 - fx) * fy;
    k.weights[y1 * size + x1] += w * fx * fy;
  };
  if (pts.size() == 1) {
    splat(pts[0].first, pts[0].second, 1.0);
  } else {
    for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
      const auto [ax, ay] = pts[s];
      const auto [bx, by] = pts[s + 1];
      const double len = std::hypot(bx - ax, by - ay);
      const auto samples = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(len * 4)));
      for (std::size_t i = 0; i < samples; ++i) {
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(samples);
        splat(ax + t * (bx - ax), ay + t * (by - ay), std::max(len, 1e-9) / static_cast<double>(samples));
      }
    }
  }
  double total = 0.0;
  for (double v : k.weights) total += v;
  for (double& v : k.weights) v /= total;
  return k;
}

Image apply_blur(const Image& sharp, const BlurKernel& kernel, double noise_sigma, std::uint64_t seed) {
  if (kernel.size > sharp.width || kernel.size > sharp.height) {
    throw std::invalid_argument("apply_blur: kernel " + std::to_string(kernel.size) + " larger than image " +
                                std::to_string(sharp.width) + "x" + std::to_string(sharp.height));
  }
  if (noise_sigma < 0.0) throw std::invalid_argument("apply_blur: noise sigma must be non-negative");
  const long r = static_cast<long>(kernel.size / 2);
  Image out(sharp.width, sharp.height);
  Rng rng(seed);
  for (std::size_t y = 0; y < sharp.height; ++y) {
    for (std::size_t x = 0; x < sharp.width; ++x) {
      double acc[3] = {0, 0, 0};
      for (std::size_t i = 0; i < kernel.size; ++i) {
        const std::size_t sy = reflect_index(static_cast<long>(y) - (static_cast<long>(i) - r), sharp.height);
        for (std::size_t j = 0; j < kernel.size; ++j) {
          const double w = kernel.at(i, j);
          if (w == 0.0) continue;
          const std::size_t sx = reflect_index(static_cast<long>(x) - (static_cast<long>(j) - r), sharp.width);
          for (std::size_t c = 0; c < 3; ++c) acc[c] += w * sharp.at(sy, sx, c);
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = noise_sigma > 0.0 ? rng.normal(0.0, noise_sigma) : 0.0;
        out.at(y, x, c) = to_byte(acc[c] + noise);
      }
    }
  }
  return out;
}

Image crop(const Image& image, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > image.height || x0 + w > image.width) throw std::invalid_argument("crop window outside the image");
  Image out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(image.pixels.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * image.width + x0) * 3), w * 3,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * 3));
  }
  return out;
}

ImagePair random_crop_pair(const ImagePair& pair, std::size_t size, Rng& rng) {
  const Image& b = pair.blurred;
  if (b.width != pair.sharp.width || b.height != pair.sharp.height) {
    throw std::invalid_argument("random_crop_pair: blurred and sharp sizes differ for '" + pair.id + "'");
  }
  if (size == 0 || size > b.width || size > b.height) {
    throw std::invalid_argument("random_crop_pair: crop " + std::to_string(size) + " exceeds image " +
                                std::to_string(b.width) + "x" + std::to_string(b.height));
  }
  const std::size_t y0 = rng.below(b.height - size + 1);
  const std::size_t x0 = rng.below(b.width - size + 1);
  return {crop(pair.blurred, y0, x0, size, size), crop(pair.sharp, y0, x0, size, size), pair.id};
}

ImagePair random_crop_pair(const ImagePair& pair, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  return random_crop_pair(pair, size, rng);
}

Tensor<float> normalize(const Image& image) { return normalize_batch({&image}); }

Tensor<float> normalize_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("normalize_batch: no images");
  const std::size_t h = images[0]->height, w = images[0]->width;
  Tensor<float> t({images.size(), 3, h, w});
  auto d = t.mutable_data();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w) throw std::invalid_argument("normalize_batch: image sizes differ");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          d[((n * 3 + c) * h + y) * w + x] = static_cast<float>(img.at(y, x, c) / 127.5 - 1.0);
  }
  return t;
}

Image denormalize(const Tensor<float>& tensor, std::size_t sample) {
  if (tensor.rank() != 4 || tensor.dim(1) != 3 || sample >= tensor.dim(0)) {
    throw ShapeError("denormalize: expected [N,3,H,W], got " + shape_str(tensor.shape()));
  }
  const std::size_t h = tensor.dim(2), w = tensor.dim(3);
  Image img(w, h);
  const auto d = tensor.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        img.at(y, x, c) = to_byte((static_cast<double>(d[((sample * 3 + c) * h + y) * w + x]) + 1.0) * 127.5);
  return img;
}

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("psnr: image sizes differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.pixels.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace {

std::vector<double> luma(const Image& img) {
  std::vector<double> y(img.width * img.height);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
  }
  return y;
}

// Valid-region separable filtering with an 11-tap Gaussian.
std::vector<double> gaussian_valid(const std::vector<double>& src, std::size_t w, std::size_t h,
                                   const std::vector<double>& g) {
  const std::size_t k = g.size(), ow = w - k + 1, oh = h - k + 1;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * src[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("ssim: image sizes differ");
  if (a.width < 11 || a.height < 11) throw std::invalid_argument("ssim: images must be at least 11x11");
  std::vector<double> g(11);
  double gs = 0.0;
  for (int i = 0; i < 11; ++i) gs += g[static_cast<std::size_t>(i)] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
  for (double& v : g) v /= gs;

  const auto ya = luma(a), yb = luma(b);
  std::vector<double> aa(ya.size()), bb(ya.size()), ab(ya.size());
  for (std::size_t i = 0; i < ya.size(); ++i) {
    aa[i] = ya[i] * ya[i];
    bb[i] = yb[i] * yb[i];
    ab[i] = ya[i] * yb[i];
  }
  const std::size_t w = a.width, h = a.height;
  const auto mu_a = gaussian_valid(ya, w, h, g), mu_b = gaussian_valid(yb, w, h, g);
  const auto e_aa = gaussian_valid(aa, w, h, g), e_bb = gaussian_valid(bb, w, h, g), e_ab = gaussian_valid(ab, w, h, g);
  const double c1 = (0.01 * 255) * (0.01 * 255), c2 = (0.03 * 255) * (0.03 * 255);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i], vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

ImagePair DatasetIndex::load(std::size_t i) const {
  if (i >= ids.size()) throw std::out_of_range("dataset index " + std::to_string(i) + " out of range");
  ImagePair p{read_image(dir / "blur" / ids[i]), read_image(dir / "sharp" / ids[i]), ids[i]};
  if (p.blurred.width != p.sharp.width || p.blurred.height != p.sharp.height) {
    throw std::runtime_error("pair '" + ids[i] + "': blurred and sharp sizes differ");
  }
  return p;
}

DatasetIndex load_dataset(const std::filesystem::path& root, const std::string& split) {
  namespace fs = std::filesystem;
  DatasetIndex idx;
  idx.root = root;
  idx.split = split;
  idx.dir = fs::is_directory(root / split / "blur") ? root / split : root;
  if (!fs::is_directory(idx.dir / "blur") || !fs::is_directory(idx.dir / "sharp")) {
    throw std::runtime_error("dataset " + root.string() + ": no blur/ and sharp/ directories (checked " +
                             (root / split).string() + " and " + root.string() + ")");
  }
  auto list = [](const fs::path& d) {
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(d))
      if (e.is_regular_file() && e.path().extension() == ".ppm") names.insert(e.path().filename().string());
    return names;
  };
  const auto blur = list(idx.dir / "blur"), sharp = list(idx.dir / "sharp");
  for (const auto& n : blur) {
    if (sharp.count(n)) idx.ids.push_back(n);
    else idx.warnings.push_back("unpaired: blur/" + n + " has no sharp/" + n);
  }
  for (const auto& n : sharp)
    if (!blur.count(n)) idx.warnings.push_back("unpaired: sharp/" + n + " has no blur/" + n);
  return idx;
}

Image synthetic_image(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(seed);
  Image img(width, height);
  std::vector<double> px(width * height * 3);
  // Smooth background gradient.
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(40, 215);
    gx[c] = rng.uniform(-60, 60) / static_cast<double>(width);
    gy[c] = rng.uniform(-60, 60) / static_cast<double>(height);
  }
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        px[(y * width + x) * 3 + c] = base[c] + gx[c] * static_cast<double>(x) + gy[c] * static_cast<double>(y);
  const double scale = static_cast<double>(std::min(width, height));
  const std::size_t shapes = 6 + rng.below(6);
  for (std::size_t s = 0; s < shapes; ++s) {
    double col[3];
    for (double& c : col) c = rng.uniform(0, 255);
    const double cx = rng.uniform(0, static_cast<double>(width)), cy = rng.uniform(0, static_cast<double>(height));
    const double r = rng.uniform(0.08, 0.3) * scale;
    const std::size_t kind = rng.below(3);
    const double period = rng.uniform(3, 9), phase = rng.uniform(0, 2 * M_PI), angle = rng.uniform(0, M_PI);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        bool inside = false;
        if (kind == 0) inside = std::abs(dx) < r && std::abs(dy) < 0.6 * r;
        else if (kind == 1) inside = dx * dx + dy * dy < r * r;
        else inside = std::abs(dx) < r && std::abs(dy) < r &&
                      std::sin((dx * std::cos(angle) + dy * std::sin(angle)) * 2 * M_PI / period + phase) > 0;
        if (inside)
          for (int c = 0; c < 3; ++c) px[(y * width + x) * 3 + c] = col[c];
      }
  }
  for (std::size_t i = 0; i < px.size(); ++i) img.pixels[i] = to_byte(px[i]);
  return img;
}

}  // namespace fmd
