#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Gradient recording is a per-thread switch.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// When enabled, every recorded forward op verifies its output is finite.
void set_check_finite(bool enabled);
bool check_finite_enabled();

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>&)>;

  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<Tensor<T>> inputs;
  BackwardFn backward;
  bool released = false;
};

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::shared_ptr<Storage<T>> grad;
  std::shared_ptr<Node<T>> grad_fn;
};

}  // namespace detail

/// Dense NCHW array with an optional autograd history.
///
/// A Tensor is a cheap handle; copies share storage. Forward results are
/// treated as immutable. Only leaves (parameters, inputs) are written in
/// place, and only outside of recorded computations.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  // Views into storage; not available on temporaries, whose storage may die
  // before the view is used.
  std::span<const T> data() const&;
  std::span<const T> data() const&& = delete;
  std::span<T> mutable_data() &;
  std::span<T> mutable_data() && = delete;
  T item() const;
  T at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  const Node* grad_fn() const;

  Tensor grad() const;
  void set_grad(const Tensor& g);
  void zero_grad();

  /// Copy of the values without history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  void backward(bool retain_graph = false, bool create_graph = false) const;

  const std::shared_ptr<detail::Storage<T>>& storage() const { return s_; }
  static Tensor from_storage(std::shared_ptr<detail::Storage<T>> s) {
    Tensor t;
    t.s_ = std::move(s);
    return t;
  }

 private:
  void require_defined() const;

  std::shared_ptr<detail::Storage<T>> s_;
};

/// Builds the result of a differentiable op. A history node is attached only
/// when recording is enabled and some input requires a gradient.
template <typename T>
Tensor<T> make_op_result(Shape shape, std::vector<T> data, const char* op,
                         std::vector<Tensor<T>> inputs,
                         typename detail::Node<T>::BackwardFn backward);

/// Recorded operations reachable from a root, in replay (reverse recording) order.
template <typename T>
class Tape {
 public:
  static Tape collect(const Tensor<T>& root);

  const std::vector<detail::Node<T>*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<detail::Node<T>*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf's grad buffer.
template <typename T>
void backward(const Tensor<T>& loss, bool retain_graph = false, bool create_graph = false);

/// Returns d(output)/d(input) for each input leaf without touching grad
/// buffers. With create_graph the results are themselves differentiable.
/// retain_graph defaults to create_graph.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs,
                            bool create_graph = false,
                            std::optional<bool> retain_graph = std::nullopt);

}  // namespace fmd
