#pragma once

// Dense float64 tensors with a define-by-run reverse-mode tape.
//
// A Tape is created per training step. While it is alive it is the active
// tape of the constructing thread: every op whose inputs require gradients
// records its result onto it. Ops evaluated with no active tape (or with no
// grad-requiring inputs) compute values only, which is how inference runs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mscl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Live and peak bytes held by tensor buffers, process wide.
class MemoryStats {
 public:
  static MemoryStats& instance() {
    static MemoryStats stats;
    return stats;
  }
  void allocate(std::int64_t bytes) {
    const auto now = live_.fetch_add(bytes) + bytes;
    auto peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
  }
  void release(std::int64_t bytes) { live_.fetch_sub(bytes); }
  std::int64_t live() const { return live_.load(); }
  std::int64_t peak() const { return peak_.load(); }
  void reset_peak() { peak_.store(live_.load()); }

 private:
  std::atomic<std::int64_t> live_{0};
  std::atomic<std::int64_t> peak_{0};
};

// 64-byte aligned storage counted in MemoryStats.
template <class T>
struct TrackedAllocator {
  using value_type = T;
  TrackedAllocator() = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    MemoryStats::instance().allocate(static_cast<std::int64_t>(n * sizeof(T)));
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryStats::instance().release(static_cast<std::int64_t>(n * sizeof(T)));
    ::operator delete(p, std::align_val_t{64});
  }
  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, TrackedAllocator<double>>;

class TapeState;

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;
  std::weak_ptr<TapeState> tape;

  Buffer& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    validate_shape(shape);
    auto node = std::make_shared<Node>();
    node->data.assign(static_cast<std::size_t>(numel_of(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  template <class Range>
  static Tensor from(Shape shape, const Range& values, bool requires_grad = false) {
    validate_shape(shape);
    const auto n = static_cast<std::size_t>(numel_of(shape));
    if (std::size(values) != n) {
      throw ShapeError("tensor data has " + std::to_string(std::size(values)) +
                       " values, shape " + shape_str(shape) + " needs " +
                       std::to_string(n));
    }
    auto node = std::make_shared<Node>();
    node->data.assign(std::begin(values), std::end(values));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false) {
    return from<std::initializer_list<double>>(std::move(shape), values,
                                               requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::int64_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t rank() const { return node().shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node().data.size()); }
  bool is_scalar() const { return numel() == 1; }

  std::span<const double> data() const { return {node().data.data(), node().data.size()}; }
  // Direct writes bypass the tape; only for leaves between steps.
  std::span<double> mutable_data() { return {node().data.data(), node().data.size()}; }
  double item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return {node().grad.data(), node().grad.size()}; }
  std::span<double> mutable_grad() {
    auto& g = node().ensure_grad();
    return {g.data(), g.size()};
  }
  void zero_grad() {
    if (has_grad()) std::fill(node().grad.begin(), node().grad.end(), 0.0);
  }

  // Value copy detached from any graph.
  Tensor detach(bool requires_grad = false) const {
    return from(shape(), node().data, requires_grad);
  }

  Node& node() const {
    if (!node_) throw Error("use of undefined tensor");
    return *node_;
  }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape) {
      if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<Node> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class TapeState {
 public:
  std::vector<std::shared_ptr<Node>> nodes;
  bool consumed = false;
};

namespace detail {
inline std::shared_ptr<TapeState>*& active_tape() {
  thread_local std::shared_ptr<TapeState>* tape = nullptr;
  return tape;
}
}  // namespace detail

// Owns one forward recording. Becomes the thread's active tape for its
// lifetime; nested tapes restore the outer one on destruction.
class Tape {
 public:
  Tape() : state_(std::make_shared<TapeState>()), previous_(detail::active_tape()) {
    detail::active_tape() = &state_;
  }
  ~Tape() { detail::active_tape() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return state_->nodes.size(); }
  bool consumed() const { return state_->consumed; }
  // Recorded nodes in creation order; emptied by backward().
  const std::vector<std::shared_ptr<Node>>& nodes() const { return state_->nodes; }

 private:
  std::shared_ptr<TapeState> state_;
  std::shared_ptr<TapeState>* previous_;
};

// Suspends recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradGuard() { detail::active_tape() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  std::shared_ptr<TapeState>* previous_;
};

// Allocates an op result. The node is recorded (and will receive a backward
// closure) only when a tape is active and some input requires grad.
inline Tensor make_result(Shape shape, std::initializer_list<Tensor> inputs,
                          std::string op) {
  auto out = Tensor::zeros(std::move(shape));
  auto& node = out.node();
  node.op = std::move(op);
  auto* tape = detail::active_tape();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) any = true;
  }
  if (!any) return out;
  node.requires_grad = true;
  node.leaf = false;
  for (const auto& t : inputs) {
    if (t.defined()) node.parents.push_back(t.ptr());
  }
  node.tape = *tape;
  (*tape)->nodes.push_back(out.ptr());
  return out;
}

inline bool recording(const Tensor& t) { return t.requires_grad() && !t.node().leaf; }

// Runs reverse accumulation from a scalar loss. Leaf gradients accumulate
// (callers zero them between steps); intermediate buffers are released.
inline void backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  auto& root = loss.node();
  if (!root.requires_grad) return;
  if (root.leaf) {
    root.ensure_grad()[0] += 1.0;
    return;
  }
  auto state = root.tape.lock();
  if (!state) throw Error("backward() on a tape that no longer exists");
  if (state->consumed) throw Error("backward() on a consumed tape");
  state->consumed = true;

  auto& nodes = state->nodes;
  auto it = std::find(nodes.begin(), nodes.end(), loss.ptr());
  if (it == nodes.end()) throw Error("loss tensor is not recorded on its tape");
  root.ensure_grad()[0] = 1.0;
  for (auto rit = std::make_reverse_iterator(it + 1); rit != nodes.rend(); ++rit) {
    Node& n = **rit;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
  for (auto& n : nodes) {
    n->backward = nullptr;
    n->parents.clear();
    Buffer().swap(n->grad);
  }
  nodes.clear();
}

// Adds g into parent's gradient when it participates.
inline void accumulate(Node& parent, std::span<const double> g) {
  if (!parent.requires_grad) return;
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace mscl
