#include "fmd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "fmd/ops.hpp"

namespace fmd {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_seq = 1;
bool g_check_finite = false;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

void set_check_finite(bool enabled) { g_check_finite = enabled; }
bool check_finite_enabled() { return g_check_finite; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : s_(std::make_shared<detail::Storage<T>>()) {
  s_->data.assign(fmd::numel(shape), fill);
  s_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : s_(std::make_shared<detail::Storage<T>>()) {
  if (fmd::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(fmd::numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  s_->shape = std::move(shape);
  s_->data = std::move(data);
}

template <typename T>
void Tensor<T>::require_defined() const {
  if (!s_) throw std::logic_error("use of an undefined tensor");
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  require_defined();
  return s_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dim " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[i];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  require_defined();
  return s_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const& {
  require_defined();
  return s_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() & {
  require_defined();
  return s_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: expected a single value, got " + shape_str(shape()));
  return s_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return s_ && s_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  require_defined();
  if (s_->grad_fn) throw AutogradError("requires_grad can only be changed on leaf tensors");
  s_->requires_grad = value;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return !s_ || !s_->grad_fn;
}

template <typename T>
const detail::Node<T>* Tensor<T>::grad_fn() const {
  return s_ ? s_->grad_fn.get() : nullptr;
}

template <typename T>
Tensor<T> Tensor<T>::grad() const {
  require_defined();
  return from_storage(s_->grad);
}

template <typename T>
void Tensor<T>::set_grad(const Tensor& g) {
  require_defined();
  if (g.defined() && g.shape() != shape()) {
    throw ShapeError("set_grad: " + shape_str(g.shape()) + " vs " + shape_str(shape()));
  }
  s_->grad = g.storage();
}

template <typename T>
void Tensor<T>::zero_grad() {
  require_defined();
  s_->grad.reset();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  require_defined();
  return Tensor(s_->shape, s_->data);
}

template <typename T>
void Tensor<T>::backward(bool retain_graph, bool create_graph) const {
  fmd::backward(*this, retain_graph, create_graph);
}

template <typename T>
Tensor<T> make_op_result(Shape shape, std::vector<T> data, const char* op,
                         std::vector<Tensor<T>> inputs,
                         typename detail::Node<T>::BackwardFn backward) {
  if (g_check_finite) {
    for (const T v : data) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
  Tensor<T> out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<detail::Node<T>>();
  node->seq = g_next_seq++;
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.storage()->requires_grad = true;
  out.storage()->grad_fn = std::move(node);
  return out;
}

template <typename T>
Tape<T> Tape<T>::collect(const Tensor<T>& root) {
  Tape tape;
  if (!root.defined() || !root.storage()->grad_fn) return tape;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{root.storage()->grad_fn.get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    tape.nodes_.push_back(node);
    for (const auto& in : node->inputs) {
      if (!in.requires_grad()) continue;
      auto* parent = in.storage()->grad_fn.get();
      if (parent && seen.insert(parent).second) stack.push_back(parent);
    }
  }
  // Sequence numbers increase with recording order, so descending order is a
  // valid reverse topological order.
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto* a, const auto* b) { return a->seq > b->seq; });
  return tape;
}

namespace {

template <typename T>
Tensor<T> accumulate(const Tensor<T>& existing, const Tensor<T>& incoming) {
  if (!existing.defined()) return incoming;
  return add(existing, incoming);
}

// Shared engine for backward() and grad(). When `wanted` is non-null the
// gradients of those leaves are returned instead of being written to their
// grad buffers.
template <typename T>
std::vector<Tensor<T>> run_backward(const Tensor<T>& root, const std::vector<Tensor<T>>* wanted,
                                    bool retain_graph, bool create_graph) {
  if (!root.defined()) throw AutogradError("backward: undefined tensor");
  if (root.numel() != 1) {
    throw AutogradError("backward: loss must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) throw AutogradError("backward: loss does not require grad");

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  std::unordered_map<const detail::Storage<T>*, std::size_t> wanted_index;
  std::vector<Tensor<T>> results;
  if (wanted) {
    results.resize(wanted->size());
    for (std::size_t i = 0; i < wanted->size(); ++i) {
      const auto& w = (*wanted)[i];
      if (!w.defined() || !w.is_leaf()) throw AutogradError("grad: inputs must be leaf tensors");
      wanted_index.emplace(w.storage().get(), i);
    }
  }

  auto deliver_leaf = [&](const Tensor<T>& leaf, const Tensor<T>& g) {
    if (wanted) {
      auto it = wanted_index.find(leaf.storage().get());
      if (it != wanted_index.end()) results[it->second] = accumulate(results[it->second], g);
      return;
    }
    auto& slot = leaf.storage()->grad;
    Tensor<T> current = Tensor<T>::from_storage(slot);
    Tensor<T> next = current.defined() ? accumulate(current, g) : (create_graph ? g : g.detach());
    slot = next.storage();
  };

  const Tensor<T> seed(root.shape(), T(1));
  if (root.is_leaf()) {
    deliver_leaf(root, seed);
    return results;
  }

  Tape<T> tape = Tape<T>::collect(root);
  std::unordered_map<detail::Node<T>*, Tensor<T>> pending;
  pending.emplace(root.storage()->grad_fn.get(), seed);

  for (auto* node : tape.nodes()) {
    if (node->released) {
      throw AutogradError(std::string("backward: graph through '") + node->op +
                          "' was already released; call with retain_graph=true to backpropagate twice");
    }
    auto it = pending.find(node);
    if (it == pending.end()) continue;
    Tensor<T> g = std::move(it->second);
    pending.erase(it);
    std::vector<Tensor<T>> input_grads = node->backward(g);
    for (std::size_t i = 0; i < node->inputs.size() && i < input_grads.size(); ++i) {
      const auto& in = node->inputs[i];
      const auto& ig = input_grads[i];
      if (!in.requires_grad() || !ig.defined()) continue;
      if (ig.shape() != in.shape()) {
        throw AutogradError(std::string("backward: '") + node->op + "' produced gradient " +
                            shape_str(ig.shape()) + " for input " + shape_str(in.shape()));
      }
      if (auto* parent = in.storage()->grad_fn.get()) {
        auto& slot = pending[parent];
        slot = accumulate(slot, ig);
      } else {
        deliver_leaf(in, ig);
      }
    }
  }

  if (!retain_graph) {
    // Dropping a node's inputs can free upstream nodes still on the tape, so
    // keep them alive until every node is marked.
    std::vector<std::vector<Tensor<T>>> hold;
    hold.reserve(tape.nodes().size());
    for (auto* node : tape.nodes()) {
      node->released = true;
      node->backward = nullptr;
      hold.push_back(std::move(node->inputs));
      node->inputs.clear();
    }
  }
  return results;
}

}  // namespace

template <typename T>
void backward(const Tensor<T>& loss, bool retain_graph, bool create_graph) {
  run_backward<T>(loss, nullptr, retain_graph, create_graph);
}

template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs,
                            bool create_graph, std::optional<bool> retain_graph) {
  auto results = run_backward<T>(output, &inputs, retain_graph.value_or(create_graph), create_graph);
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].defined()) results[i] = Tensor<T>(inputs[i].shape(), T(0));
  }
  return results;
}

#define FMD_INSTANTIATE(T)                                                                 \
  template class Tensor<T>;                                                                \
  template class Tape<T>;                                                                  \
  template Tensor<T> make_op_result<T>(Shape, std::vector<T>, const char*,                 \
                                       std::vector<Tensor<T>>,                             \
                                       typename detail::Node<T>::BackwardFn);              \
  template void backward<T>(const Tensor<T>&, bool, bool);                                 \
  template std::vector<Tensor<T>> grad<T>(const Tensor<T>&, const std::vector<Tensor<T>>&, \
                                          bool, std::optional<bool>);

FMD_INSTANTIATE(float)
FMD_INSTANTIATE(double)

#undef FMD_INSTANTIATE

}  // namespace fmd
