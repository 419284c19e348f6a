#include <Eigen/Core>
#include <algorithm>
#include <string>

#include "fmd/ops.hpp"

namespace fmd {

namespace {

template <typename T>
using Grads = std::vector<Tensor<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Upper bound on im2col scratch size (elements); output rows are tiled to fit.
constexpr std::size_t kColsBudget = std::size_t{1} << 22;

struct ConvDims {
  std::size_t n, cin, h, w, cout, k, ho, wo, stride, pad;
  bool depthwise;

  std::size_t patch() const { return (depthwise ? 1 : cin) * k * k; }
  std::size_t out_pixels() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  Shape input_shape() const { return {n, cin, h, w}; }
  Shape output_shape() const { return {n, cout, ho, wo}; }
  Shape weight_shape() const { return {cout, depthwise ? 1 : cin, k, k}; }
};

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                          const char* op) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

ConvDims make_dims(const Shape& x, const Shape& w, ConvGeometry geom, const char* op) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError(std::string(op) + ": expected rank-4 input and weights, got " + shape_str(x) +
                     " and " + shape_str(w));
  }
  if (w[2] != w[3]) throw ShapeError(std::string(op) + ": kernel must be square, got " + shape_str(w));
  ConvDims d{};
  d.n = x[0];
  d.cin = x[1];
  d.h = x[2];
  d.w = x[3];
  d.cout = w[0];
  d.k = w[2];
  d.stride = geom.stride;
  d.pad = geom.padding;
  d.depthwise = geom.depthwise;
  if (geom.depthwise) {
    if (w[1] != 1 || w[0] != x[1]) {
      throw ShapeError(std::string(op) + ": depthwise weights " + shape_str(w) + " need shape [" +
                       std::to_string(x[1]) + ",1,k,k] for input " + shape_str(x));
    }
  } else if (w[1] != x[1]) {
    throw ShapeError(std::string(op) + ": channel mismatch, input " + shape_str(x) + " vs weights " +
                     shape_str(w));
  }
  d.ho = conv_out_size(d.h, d.k, d.stride, d.pad, op);
  d.wo = conv_out_size(d.w, d.k, d.stride, d.pad, op);
  return d;
}

template <typename T>
void im2col(const T* x, const ConvDims& d, std::size_t r0, std::size_t r1, T* cols) {
  const std::size_t tile = (r1 - r0) * d.wo;
  const auto pad = static_cast<std::ptrdiff_t>(d.pad);
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        T* row = cols + ((c * d.k + ky) * d.k + kx) * tile;
        const T* plane = x + c * d.h * d.w;
        for (std::size_t oy = r0; oy < r1; ++oy) {
          T* out = row + (oy - r0) * d.wo;
          const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill_n(out, d.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - pad;
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) ? T(0)
                                                                         : src[static_cast<std::size_t>(ix)];
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvDims& d, std::size_t r0, std::size_t r1, T* gx) {
  const std::size_t tile = (r1 - r0) * d.wo;
  const auto pad = static_cast<std::ptrdiff_t>(d.pad);
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const T* row = cols + ((c * d.k + ky) * d.k + kx) * tile;
        T* plane = gx + c * d.h * d.w;
        for (std::size_t oy = r0; oy < r1; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          const T* in = row + (oy - r0) * d.wo;
          T* dst = plane + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w)) dst[ix] += in[ox];
          }
        }
      }
}

std::size_t rows_per_tile(const ConvDims& d) {
  const std::size_t per_row = std::max<std::size_t>(1, d.patch() * d.wo);
  return std::clamp<std::size_t>(kColsBudget / per_row, 1, d.ho);
}

template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// --- dense kernels ---------------------------------------------------------

template <typename T>
void dense_forward(const T* x, const T* w, const ConvDims& d, T* y) {
  const std::size_t K = d.patch(), P = d.out_pixels();
  ConstMap<T> wm(w, d.cout, K, Eigen::OuterStride<>(K));
  std::vector<T> cols;
  const std::size_t tile_rows = rows_per_tile(d);
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* xn = x + n * d.cin * d.h * d.w;
    T* yn = y + n * d.cout * P;
    if (d.pointwise()) {
      ConstMap<T> xm(xn, d.cin, P, Eigen::OuterStride<>(P));
      MutMap<T> ym(yn, d.cout, P, Eigen::OuterStride<>(P));
      ym.noalias() = wm * xm;
      continue;
    }
    for (std::size_t r0 = 0; r0 < d.ho; r0 += tile_rows) {
      const std::size_t r1 = std::min(d.ho, r0 + tile_rows), tp = (r1 - r0) * d.wo;
      cols.resize(K * tp);
      im2col(xn, d, r0, r1, cols.data());
      ConstMap<T> cm(cols.data(), K, tp, Eigen::OuterStride<>(tp));
      MutMap<T> ym(yn + r0 * d.wo, d.cout, tp, Eigen::OuterStride<>(P));
      ym.noalias() = wm * cm;
    }
  }
}

template <typename T>
void dense_input_grad(const T* g, const T* w, const ConvDims& d, T* gx) {
  const std::size_t K = d.patch(), P = d.out_pixels();
  ConstMap<T> wm(w, d.cout, K, Eigen::OuterStride<>(K));
  std::vector<T> cols;
  const std::size_t tile_rows = rows_per_tile(d);
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* gn = g + n * d.cout * P;
    T* gxn = gx + n * d.cin * d.h * d.w;
    if (d.pointwise()) {
      ConstMap<T> gm(gn, d.cout, P, Eigen::OuterStride<>(P));
      MutMap<T> xm(gxn, d.cin, P, Eigen::OuterStride<>(P));
      xm.noalias() = wm.transpose() * gm;
      continue;
    }
    for (std::size_t r0 = 0; r0 < d.ho; r0 += tile_rows) {
      const std::size_t r1 = std::min(d.ho, r0 + tile_rows), tp = (r1 - r0) * d.wo;
      cols.resize(K * tp);
      ConstMap<T> gm(gn + r0 * d.wo, d.cout, tp, Eigen::OuterStride<>(P));
      MutMap<T> cm(cols.data(), K, tp, Eigen::OuterStride<>(tp));
      cm.noalias() = wm.transpose() * gm;
      col2im(cols.data(), d, r0, r1, gxn);
    }
  }
}

template <typename T>
void dense_weight_grad(const T* x, const T* g, const ConvDims& d, T* gw) {
  const std::size_t K = d.patch(), P = d.out_pixels();
  MutMap<T> gwm(gw, d.cout, K, Eigen::OuterStride<>(K));
  std::vector<T> cols;
  const std::size_t tile_rows = rows_per_tile(d);
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* xn = x + n * d.cin * d.h * d.w;
    const T* gn = g + n * d.cout * P;
    if (d.pointwise()) {
      ConstMap<T> xm(xn, d.cin, P, Eigen::OuterStride<>(P));
      ConstMap<T> gm(gn, d.cout, P, Eigen::OuterStride<>(P));
      gwm.noalias() += gm * xm.transpose();
      continue;
    }
    for (std::size_t r0 = 0; r0 < d.ho; r0 += tile_rows) {
      const std::size_t r1 = std::min(d.ho, r0 + tile_rows), tp = (r1 - r0) * d.wo;
      cols.resize(K * tp);
      im2col(xn, d, r0, r1, cols.data());
      ConstMap<T> cm(cols.data(), K, tp, Eigen::OuterStride<>(tp));
      ConstMap<T> gm(gn + r0 * d.wo, d.cout, tp, Eigen::OuterStride<>(P));
      gwm.noalias() += gm * cm.transpose();
    }
  }
}

// --- depthwise kernels -----------------------------------------------------

// Calls f(in_offset, out_offset, tap) for every (input, output, tap) triple of
// one channel plane, in a fixed order.
template <typename F>
void depthwise_taps(const ConvDims& d, F&& f) {
  const auto pad = static_cast<std::ptrdiff_t>(d.pad);
  for (std::size_t ky = 0; ky < d.k; ++ky)
    for (std::size_t kx = 0; kx < d.k; ++kx) {
      const std::size_t tap = ky * d.k + kx;
      for (std::size_t oy = 0; oy < d.ho; ++oy) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
        for (std::size_t ox = 0; ox < d.wo; ++ox) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
          f(static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix), oy * d.wo + ox, tap);
        }
      }
    }
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const ConvDims& d, T* y) {
  const std::size_t hw = d.h * d.w, P = d.out_pixels(), kk = d.k * d.k;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.cin; ++c) {
      const T* xp = x + (n * d.cin + c) * hw;
      T* yp = y + (n * d.cin + c) * P;
      const T* wp = w + c * kk;
      depthwise_taps(d, [&](std::size_t i, std::size_t o, std::size_t t) { yp[o] += wp[t] * xp[i]; });
    }
}

template <typename T>
void depthwise_input_grad(const T* g, const T* w, const ConvDims& d, T* gx) {
  const std::size_t hw = d.h * d.w, P = d.out_pixels(), kk = d.k * d.k;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.cin; ++c) {
      const T* gp = g + (n * d.cin + c) * P;
      T* xp = gx + (n * d.cin + c) * hw;
      const T* wp = w + c * kk;
      depthwise_taps(d, [&](std::size_t i, std::size_t o, std::size_t t) { xp[i] += wp[t] * gp[o]; });
    }
}

template <typename T>
void depthwise_weight_grad(const T* x, const T* g, const ConvDims& d, T* gw) {
  const std::size_t hw = d.h * d.w, P = d.out_pixels(), kk = d.k * d.k;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.cin; ++c) {
      const T* xp = x + (n * d.cin + c) * hw;
      const T* gp = g + (n * d.cin + c) * P;
      T* wp = gw + c * kk;
      depthwise_taps(d, [&](std::size_t i, std::size_t o, std::size_t t) { wp[t] += xp[i] * gp[o]; });
    }
}

}  // namespace

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry geom) {
  const ConvDims d = make_dims(x.shape(), w.shape(), geom, "conv2d");
  std::vector<T> out(numel(d.output_shape()), T(0));
  if (d.depthwise) {
    depthwise_forward(x.data().data(), w.data().data(), d, out.data());
  } else {
    dense_forward(x.data().data(), w.data().data(), d, out.data());
  }
  return make_op_result<T>(d.output_shape(), std::move(out), "conv2d", {x, w},
                           [x, w, geom](const Tensor<T>& g) {
                             return Grads<T>{
                                 x.requires_grad() ? conv_input_grad(g, w, geom, x.shape()) : Tensor<T>{},
                                 w.requires_grad() ? conv_weight_grad(x, g, geom, w.shape()) : Tensor<T>{}};
                           });
}

template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& g, const Tensor<T>& w, ConvGeometry geom,
                          const Shape& input_shape) {
  const ConvDims d = make_dims(input_shape, w.shape(), geom, "conv2d_transposed");
  if (g.shape() != d.output_shape()) {
    throw ShapeError("conv2d_transposed: input " + shape_str(g.shape()) + " does not map to " +
                     shape_str(input_shape) + " (expected " + shape_str(d.output_shape()) + ")");
  }
  std::vector<T> out(numel(input_shape), T(0));
  if (d.depthwise) {
    depthwise_input_grad(g.data().data(), w.data().data(), d, out.data());
  } else {
    dense_input_grad(g.data().data(), w.data().data(), d, out.data());
  }
  return make_op_result<T>(input_shape, std::move(out), "conv2d_transposed", {g, w},
                           [g, w, geom](const Tensor<T>& gg) {
                             return Grads<T>{
                                 g.requires_grad() ? conv_forward(gg, w, geom) : Tensor<T>{},
                                 w.requires_grad() ? conv_weight_grad(gg, g, geom, w.shape()) : Tensor<T>{}};
                           });
}

template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& x, const Tensor<T>& g, ConvGeometry geom,
                           const Shape& weight_shape) {
  const ConvDims d = make_dims(x.shape(), weight_shape, geom, "conv2d_weight_grad");
  if (g.shape() != d.output_shape()) {
    throw ShapeError("conv2d_weight_grad: gradient " + shape_str(g.shape()) + " vs expected " +
                     shape_str(d.output_shape()));
  }
  std::vector<T> out(numel(weight_shape), T(0));
  if (d.depthwise) {
    depthwise_weight_grad(x.data().data(), g.data().data(), d, out.data());
  } else {
    dense_weight_grad(x.data().data(), g.data().data(), d, out.data());
  }
  return make_op_result<T>(weight_shape, std::move(out), "conv2d_weight_grad", {x, g},
                           [x, g, geom](const Tensor<T>& gw) {
                             return Grads<T>{
                                 x.requires_grad() ? conv_input_grad(g, gw, geom, x.shape()) : Tensor<T>{},
                                 g.requires_grad() ? conv_forward(x, gw, geom) : Tensor<T>{}};
                           });
}

namespace {

using PoolIndex = std::shared_ptr<const std::vector<std::size_t>>;

template <typename T>
Tensor<T> pool_gather(const Tensor<T>& x, PoolIndex idx, const Shape& out_shape);

// out[idx[j]] += g[j]
template <typename T>
Tensor<T> pool_scatter(const Tensor<T>& g, PoolIndex idx, const Shape& in_shape) {
  std::vector<T> out(numel(in_shape), T(0));
  auto src = g.data();
  for (std::size_t j = 0; j < src.size(); ++j) out[(*idx)[j]] += src[j];
  return make_op_result<T>(in_shape, std::move(out), "max_pool_backward", {g},
                           [idx, os = g.shape()](const Tensor<T>& gg) {
                             return Grads<T>{pool_gather(gg, idx, os)};
                           });
}

template <typename T>
Tensor<T> pool_gather(const Tensor<T>& x, PoolIndex idx, const Shape& out_shape) {
  std::vector<T> out(numel(out_shape));
  auto src = x.data();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = src[(*idx)[j]];
  return make_op_result<T>(out_shape, std::move(out), "max_pool_gather", {x},
                           [idx, is = x.shape()](const Tensor<T>& g) {
                             return Grads<T>{pool_scatter(g, idx, is)};
                           });
}

}  // namespace

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = conv_out_size(h, kernel, stride, 0, "max_pool2d");
  const std::size_t wo = conv_out_size(w, kernel, stride, 0, "max_pool2d");
  auto src = x.data();
  auto idx = std::make_shared<std::vector<std::size_t>>(n * c * ho * wo);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t i = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (src[i] > src[best]) best = i;
          }
        (*idx)[(p * ho + oy) * wo + ox] = best;
      }
  return pool_gather(x, PoolIndex(idx), Shape{n, c, ho, wo});
}

#define FMD_INSTANTIATE(T)                                                                       \
  template Tensor<T> conv_forward(const Tensor<T>&, const Tensor<T>&, ConvGeometry);             \
  template Tensor<T> conv_input_grad(const Tensor<T>&, const Tensor<T>&, ConvGeometry,           \
                                     const Shape&);                                              \
  template Tensor<T> conv_weight_grad(const Tensor<T>&, const Tensor<T>&, ConvGeometry,          \
                                      const Shape&);                                             \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t);

FMD_INSTANTIATE(float)
FMD_INSTANTIATE(double)

#undef FMD_INSTANTIATE

}  // namespace fmd
