#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace posealign {

using Shape = std::vector<int>;

/// Cache-line aligned allocator. Eigen picks its vectorised peeling from the
/// runtime address of a buffer, so a fixed alignment keeps reductions
/// bitwise reproducible across processes.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Raised when tensor shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the autodiff tape (double backward, non-scalar loss, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. The gradient slot is allocated lazily by the autodiff tape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(values.begin(), values.end());
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_ ? impl_->shape : empty_shape(); }
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const { return shape().at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const { return impl_ ? impl_->data.size() : 0; }

  std::span<T> data() { return impl_ ? std::span<T>(impl_->data) : std::span<T>(); }
  std::span<const T> data() const { return impl_ ? std::span<const T>(impl_->data) : std::span<const T>(); }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, zero-initialised on first access. Handles share
  /// storage, so this is callable on const handles.
  std::span<T> grad_mut() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor out;
    out.impl_ = std::make_shared<Impl>(*impl_);
    return out;
  }
  Tensor detach() const { return from_buffer(shape(), impl_->data); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    }
    return from_buffer(std::move(shape), impl_->data);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(values), requires_grad());
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  static Tensor from_buffer(Shape shape, const Buffer<T>& data) {
    Tensor out;
    out.impl_ = std::make_shared<Impl>();
    out.impl_->shape = std::move(shape);
    out.impl_->data = data;
    return out;
  }

  static const Shape& empty_shape() {
    static const Shape s;
    return s;
  }

  struct Impl {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Append-only autodiff tape. Nodes are stored in insertion order, which is
/// a valid topological order because every op records after its inputs exist.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  /// A disabled graph records nothing: ops run forward-only.
  explicit Graph(bool enabled = true) : enabled_(enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
  }
  bool tracks(const std::vector<Tensor<T>>& inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  }

  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output, BackwardFn fn) {
    if (backward_done_) throw GraphError("cannot record '" + std::string(op) + "' after backward");
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(output), std::move(fn)});
  }

  /// Fills the gradient slot of every tensor that requires grad with
  /// d(loss)/d(tensor). Gradients add into existing buffers.
  void backward(const Tensor<T>& loss) {
    if (backward_done_) throw GraphError("backward called twice on the same graph without zero_grad()");
    if (loss.numel() != 1) throw GraphError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw GraphError("loss does not depend on any tensor requiring grad");
    Tensor<T> seed = loss;
    seed.grad_mut()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
    }
    backward_done_ = true;
  }

  /// Releases the gradients of every tensor on the tape (parameters
  /// included) and re-arms backward().
  void zero_grad() {
    for (auto& node : nodes_) {
      node.output.zero_grad();
      for (auto& in : node.inputs) {
        if (in.defined()) in.zero_grad();
      }
    }
    backward_done_ = false;
  }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  bool enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string_view op, std::size_t index)
      : std::runtime_error("non-finite value produced by " + std::string(op) + " at flat index " +
                           std::to_string(index)),
        op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

/// Throws NonFiniteError if any element is NaN/Inf. Called by ops in debug builds.
template <typename T>
void check_finite(const Tensor<T>& t, std::string_view op) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) throw NonFiniteError(op, i);
  }
}

template <typename T>
inline void debug_check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] std::string_view op) {
#ifndef NDEBUG
  check_finite(t, op);
#endif
}

}  // namespace posealign
