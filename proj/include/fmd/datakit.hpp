#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmd/rng.hpp"
#include "fmd/tensor.hpp"

namespace fmd {

/// 8-bit RGB, row-major, channels interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

struct ImagePair {
  Image blurred;
  Image sharp;
  std::string id;
};

class ImageFormatError : public std::runtime_error {
 public:
  ImageFormatError(const std::string& message, std::size_t offset)
      : std::runtime_error(message + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Binary PPM (P6, maxval 255). Header comments are accepted.
Image decode_ppm(const std::string& bytes);
std::string encode_ppm(const Image& image);
Image read_image(const std::filesystem::path& path);
void write_image(const Image& image, const std::filesystem::path& path);

/// k x k nonnegative weights summing to 1, row-major.
struct BlurKernel {
  std::size_t size = 1;
  std::vector<double> weights{1.0};
  double at(std::size_t y, std::size_t x) const { return weights[y * size + x]; }
};

/// Random smooth trajectory of `steps` points, centred on its mean and
/// rasterized with bilinear splats, normalized to sum 1. steps == 1 is a delta.
BlurKernel gen_motion_kernel(std::uint64_t seed, std::size_t size, std::size_t steps);

/// Per-channel convolution with reflect boundary, plus N(0, sigma) noise in
/// 8-bit units, rounded half away from zero and clipped to [0,255].
Image apply_blur(const Image& sharp, const BlurKernel& kernel, double noise_sigma, std::uint64_t seed);

/// Same window for both images.
ImagePair random_crop_pair(const ImagePair& pair, std::size_t crop, Rng& rng);
ImagePair random_crop_pair(const ImagePair& pair, std::size_t crop, std::uint64_t seed);
Image crop(const Image& image, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);

/// v / 127.5 - 1 into a [1,3,H,W] tensor, and back with rounding and clipping.
Tensor<float> normalize(const Image& image);
Image denormalize(const Tensor<float>& tensor, std::size_t sample = 0);
/// Stacks normalized images into [N,3,H,W].
Tensor<float> normalize_batch(const std::vector<const Image*>& images);

/// 10 log10(255^2 / MSE) over all channels; +infinity for identical images.
double psnr(const Image& a, const Image& b);
/// Mean SSIM on Rec.601 luma, 11x11 Gaussian window (sigma 1.5), valid region.
double ssim(const Image& a, const Image& b);

struct DatasetIndex {
  std::filesystem::path root;
  std::string split;
  /// Directory holding blur/ and sharp/.
  std::filesystem::path dir;
  std::vector<std::string> ids;
  std::vector<std::string> warnings;

  ImagePair load(std::size_t i) const;
  std::size_t size() const { return ids.size(); }
};

/// Uses root/<split>/{blur,sharp} when present, else root/{blur,sharp}.
/// Unpaired files are reported in `warnings` and skipped.
DatasetIndex load_dataset(const std::filesystem::path& root, const std::string& split = "train");

/// Procedural sharp content: gradients, rectangles, discs and stripes.
Image synthetic_image(std::size_t width, std::size_t height, std::uint64_t seed);

}  // namespace fmd
