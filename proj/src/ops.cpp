#include "fmd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace fmd {

namespace {

template <typename T>
using Grads = std::vector<Tensor<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <typename T, typename F>
std::vector<T> map_values(const Tensor<T>& a, F f) {
  auto src = a.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> masked_op(const Tensor<T>& a, const char* op, F value_and_slope) {
  auto src = a.data();
  std::vector<T> out(src.size());
  auto mask = std::make_shared<std::vector<T>>(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto [v, d] = value_and_slope(src[i]);
    out[i] = v;
    (*mask)[i] = d;
  }
  std::shared_ptr<const std::vector<T>> shared = mask;
  return make_op_result<T>(a.shape(), std::move(out), op, {a},
                           [shared](const Tensor<T>& g) { return Grads<T>{apply_mask(g, shared)}; });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op_result<T>(a.shape(), std::move(out), "add", {a, b},
                           [](const Tensor<T>& g) { return Grads<T>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_op_result<T>(a.shape(), std::move(out), "sub", {a, b},
                           [](const Tensor<T>& g) { return Grads<T>{g, scale(g, T(-1))}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op_result<T>(a.shape(), std::move(out), "mul", {a, b}, [a, b](const Tensor<T>& g) {
    return Grads<T>{a.requires_grad() ? mul(g, b) : Tensor<T>{},
                    b.requires_grad() ? mul(g, a) : Tensor<T>{}};
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return make_op_result<T>(a.shape(), map_values(a, [s](T v) { return v * s; }), "scale", {a},
                           [s](const Tensor<T>& g) { return Grads<T>{scale(g, s)}; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return make_op_result<T>(a.shape(), map_values(a, [s](T v) { return v + s; }), "add_scalar", {a},
                           [](const Tensor<T>& g) { return Grads<T>{g}; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return masked_op(a, "clamp", [lo, hi](T v) {
    if (v < lo) return std::pair<T, T>{lo, T(0)};
    if (v > hi) return std::pair<T, T>{hi, T(0)};
    return std::pair<T, T>{v, T(1)};
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return masked_op(a, "relu", [](T v) {
    return v > T(0) ? std::pair<T, T>{v, T(1)} : std::pair<T, T>{T(0), T(0)};
  });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T alpha) {
  return masked_op(a, "leaky_relu", [alpha](T v) {
    return v > T(0) ? std::pair<T, T>{v, T(1)} : std::pair<T, T>{alpha * v, alpha};
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return make_op_result<T>(a.shape(), map_values(a, [](T v) { return std::tanh(v); }), "tanh", {a},
                           [a](const Tensor<T>& g) {
                             // d tanh = 1 - tanh^2; recomputed so the rule stays differentiable.
                             Tensor<T> y = tanh(a);
                             return Grads<T>{mul(g, add_scalar(scale(mul(y, y), T(-1)), T(1)))};
                           });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& a, T p) {
  return make_op_result<T>(a.shape(), map_values(a, [p](T v) { return std::pow(v, p); }), "pow",
                           {a}, [a, p](const Tensor<T>& g) {
                             return Grads<T>{mul(g, scale(pow(a, p - T(1)), p))};
                           });
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& a, std::shared_ptr<const std::vector<T>> mask) {
  if (!mask || mask->size() != a.numel()) throw ShapeError("apply_mask: mask size mismatch");
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * (*mask)[i];
  return make_op_result<T>(a.shape(), std::move(out), "apply_mask", {a},
                           [mask](const Tensor<T>& g) { return Grads<T>{apply_mask(g, mask)}; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("sum: empty tensor");
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Shape shape = x.shape();
  return make_op_result<T>({}, {acc}, "sum", {x}, [shape](const Tensor<T>& g) {
    return Grads<T>{broadcast_scalar(g, shape)};
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& s, const Shape& shape) {
  const T v = s.item();
  return make_op_result<T>(shape, std::vector<T>(numel(shape), v), "broadcast_scalar", {s},
                           [sshape = s.shape()](const Tensor<T>& g) {
                             return Grads<T>{reshape(sum(g), sshape)};
                           });
}

template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& x) {
  if (x.rank() < 1 || x.numel() == 0) throw ShapeError("sum_per_sample: empty tensor");
  const std::size_t n = x.dim(0), inner = x.numel() / n;
  auto src = x.data();
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i] += src[i * inner + j];
  return make_op_result<T>({n}, std::move(out), "sum_per_sample", {x},
                           [shape = x.shape()](const Tensor<T>& g) {
                             return Grads<T>{broadcast_per_sample(g, shape)};
                           });
}

template <typename T>
Tensor<T> broadcast_per_sample(const Tensor<T>& v, const Shape& shape) {
  if (v.rank() != 1 || shape.empty() || shape[0] != v.dim(0)) {
    throw ShapeError("broadcast_per_sample: " + shape_str(v.shape()) + " to " + shape_str(shape));
  }
  const std::size_t n = shape[0], inner = numel(shape) / n;
  auto src = v.data();
  std::vector<T> out(numel(shape));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = src[i];
  return make_op_result<T>(shape, std::move(out), "broadcast_per_sample", {v},
                           [](const Tensor<T>& g) { return Grads<T>{sum_per_sample(g)}; });
}

template <typename T>
Tensor<T> spatial_sum(const Tensor<T>& x) {
  require_rank(x, 4, "spatial_sum");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  auto src = x.data();
  std::vector<T> out(nc, T(0));
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < hw; ++j) acc += src[i * hw + j];
    out[i] = acc;
  }
  const std::size_t h = x.dim(2), w = x.dim(3);
  return make_op_result<T>({x.dim(0), x.dim(1)}, std::move(out), "spatial_sum", {x},
                           [h, w](const Tensor<T>& g) { return Grads<T>{broadcast_spatial(g, h, w)}; });
}

template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& v, std::size_t h, std::size_t w) {
  require_rank(v, 2, "broadcast_spatial");
  const std::size_t nc = v.numel(), hw = h * w;
  auto src = v.data();
  std::vector<T> out(nc * hw);
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] = src[i];
  return make_op_result<T>({v.dim(0), v.dim(1), h, w}, std::move(out), "broadcast_spatial", {v},
                           [](const Tensor<T>& g) { return Grads<T>{spatial_sum(g)}; });
}

template <typename T>
Tensor<T> channel_sum(const Tensor<T>& x) {
  require_rank(x, 4, "channel_sum");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto src = x.data();
  std::vector<T> out(c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = src.data() + (i * c + ch) * hw;
      T acc = T(0);
      for (std::size_t j = 0; j < hw; ++j) acc += p[j];
      out[ch] += acc;
    }
  return make_op_result<T>({c}, std::move(out), "channel_sum", {x},
                           [shape = x.shape()](const Tensor<T>& g) {
                             return Grads<T>{broadcast_channels(g, shape)};
                           });
}

template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& b, const Shape& shape) {
  if (b.rank() != 1 || shape.size() != 4 || shape[1] != b.dim(0)) {
    throw ShapeError("broadcast_channels: " + shape_str(b.shape()) + " to " + shape_str(shape));
  }
  const std::size_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  auto src = b.data();
  std::vector<T> out(numel(shape));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((i * c + ch) * hw), hw, src[ch]);
  return make_op_result<T>(shape, std::move(out), "broadcast_channels", {b},
                           [](const Tensor<T>& g) { return Grads<T>{channel_sum(g)}; });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank(x, 4, "add_channel_bias");
  if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto src = x.data();
  auto bias = b.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) out[base + j] = src[base + j] + bias[ch];
    }
  return make_op_result<T>(x.shape(), std::move(out), "add_channel_bias", {x, b},
                           [b](const Tensor<T>& g) {
                             return Grads<T>{g, b.requires_grad() ? channel_sum(g) : Tensor<T>{}};
                           });
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const std::vector<T>& scale_c,
                         const std::vector<T>& shift_c) {
  require_rank(x, 4, "channel_affine");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (scale_c.size() != c || shift_c.size() != c) {
    throw ShapeError("channel_affine: coefficient count does not match " + shape_str(x.shape()));
  }
  auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) out[base + j] = src[base + j] * scale_c[ch] + shift_c[ch];
    }
  return make_op_result<T>(x.shape(), std::move(out), "channel_affine", {x},
                           [scale_c, c](const Tensor<T>& g) {
                             return Grads<T>{channel_affine(g, scale_c, std::vector<T>(c, T(0)))};
                           });
}

namespace {

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= static_cast<std::ptrdiff_t>(n)) return 2 * n - 2 - static_cast<std::size_t>(i);
  return static_cast<std::size_t>(i);
}

}  // namespace

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::size_t width) {
  require_rank(x, 4, "reflect_pad");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (width >= h || width >= w) {
    throw ShapeError("reflect_pad: width " + std::to_string(width) + " must be smaller than " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t ph = h + 2 * width, pw = w + 2 * width;
  auto src = x.data();
  std::vector<T> out(n * c * ph * pw);
  const auto off = static_cast<std::ptrdiff_t>(width);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* in = src.data() + p * h * w;
    T* o = out.data() + p * ph * pw;
    for (std::size_t y = 0; y < ph; ++y) {
      const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) - off, h);
      for (std::size_t xx = 0; xx < pw; ++xx) {
        o[y * pw + xx] = in[sy * w + reflect_index(static_cast<std::ptrdiff_t>(xx) - off, w)];
      }
    }
  }
  return make_op_result<T>({n, c, ph, pw}, std::move(out), "reflect_pad", {x},
                           [width](const Tensor<T>& g) { return Grads<T>{reflect_pad_adjoint(g, width)}; });
}

template <typename T>
Tensor<T> reflect_pad_adjoint(const Tensor<T>& g, std::size_t width) {
  require_rank(g, 4, "reflect_pad_adjoint");
  const std::size_t n = g.dim(0), c = g.dim(1), ph = g.dim(2), pw = g.dim(3);
  if (ph <= 2 * width || pw <= 2 * width) throw ShapeError("reflect_pad_adjoint: input too small");
  const std::size_t h = ph - 2 * width, w = pw - 2 * width;
  auto src = g.data();
  std::vector<T> out(n * c * h * w, T(0));
  const auto off = static_cast<std::ptrdiff_t>(width);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* in = src.data() + p * ph * pw;
    T* o = out.data() + p * h * w;
    for (std::size_t y = 0; y < ph; ++y) {
      const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) - off, h);
      for (std::size_t xx = 0; xx < pw; ++xx) {
        o[sy * w + reflect_index(static_cast<std::ptrdiff_t>(xx) - off, w)] += in[y * pw + xx];
      }
    }
  }
  return make_op_result<T>({n, c, h, w}, std::move(out), "reflect_pad_adjoint", {g},
                           [width](const Tensor<T>& gg) { return Grads<T>{reflect_pad(gg, width)}; });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto pa = a.data(), pb = b.data();
  std::vector<T> out(n * (ca + cb) * hw);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(pa.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(pb.data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return make_op_result<T>({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels",
                           {a, b}, [ca, cb](const Tensor<T>& g) {
                             return Grads<T>{slice_channels(g, 0, ca), slice_channels(g, ca, cb)};
                           });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x, 4, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin + count > c || count == 0) throw ShapeError("slice_channels: range out of bounds");
  auto src = x.data();
  std::vector<T> out(n * count * hw);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(src.data() + (i * c + begin) * hw, count * hw, out.data() + i * count * hw);
  return make_op_result<T>({n, count, x.dim(2), x.dim(3)}, std::move(out), "slice_channels", {x},
                           [begin, c](const Tensor<T>& g) { return Grads<T>{embed_channels(g, begin, c)}; });
}

template <typename T>
Tensor<T> embed_channels(const Tensor<T>& x, std::size_t begin, std::size_t total) {
  require_rank(x, 4, "embed_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin + c > total) throw ShapeError("embed_channels: range out of bounds");
  auto src = x.data();
  std::vector<T> out(n * total * hw, T(0));
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(src.data() + i * c * hw, c * hw, out.data() + (i * total + begin) * hw);
  return make_op_result<T>({n, total, x.dim(2), x.dim(3)}, std::move(out), "embed_channels", {x},
                           [begin, c](const Tensor<T>& g) { return Grads<T>{slice_channels(g, begin, c)}; });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op_result<T>(std::move(shape), std::move(out), "reshape", {x},
                           [old = x.shape()](const Tensor<T>& g) { return Grads<T>{reshape(g, old)}; });
}

#define FMD_INSTANTIATE(T)                                                                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                            \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                            \
  template Tensor<T> tanh(const Tensor<T>&);                                                     \
  template Tensor<T> pow(const Tensor<T>&, T);                                                   \
  template Tensor<T> apply_mask(const Tensor<T>&, std::shared_ptr<const std::vector<T>>);        \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> broadcast_scalar(const Tensor<T>&, const Shape&);                           \
  template Tensor<T> sum_per_sample(const Tensor<T>&);                                           \
  template Tensor<T> broadcast_per_sample(const Tensor<T>&, const Shape&);                       \
  template Tensor<T> spatial_sum(const Tensor<T>&);                                              \
  template Tensor<T> broadcast_spatial(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> channel_sum(const Tensor<T>&);                                              \
  template Tensor<T> broadcast_channels(const Tensor<T>&, const Shape&);                         \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> channel_affine(const Tensor<T>&, const std::vector<T>&,                     \
                                    const std::vector<T>&);                                      \
  template Tensor<T> reflect_pad(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> reflect_pad_adjoint(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> embed_channels(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

FMD_INSTANTIATE(float)
FMD_INSTANTIATE(double)

#undef FMD_INSTANTIATE

}  // namespace fmd
