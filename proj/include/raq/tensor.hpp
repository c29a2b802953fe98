#pragma once

// Dense row-major tensor with a dynamic reverse-mode autodiff graph.
//
// Every op allocates a node holding its value, the nodes it read, and a
// backward rule. The graph is owned by the output tensors through shared
// pointers, so dropping the loss frees the whole step. Tape linearises
// the graph reachable from a root into topological order for backward().

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace raq {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  bool grad_populated = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad, accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using node_type = detail::Node<Scalar>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false) {
    if (numel(shape) != values.size())
      throw shape_error("tensor: " + std::to_string(values.size()) +
                        " values do not fill shape " + to_string(shape));
    auto node = std::make_shared<node_type>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    Tensor t(std::move(node));
    t.check_finite();
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), Scalar(0), requires_grad);
  }

  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  // Builds an op output. Records the graph edge only when some input needs
  // a gradient and recording is enabled.
  static Tensor make_op(const char* op, Shape shape, std::vector<Scalar> value,
                        std::vector<Tensor> inputs, std::function<void(node_type&)> backward) {
    auto node = std::make_shared<node_type>();
    node->op = op;
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs && grad_enabled()) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
    Tensor t(std::move(node));
    t.check_finite();
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  std::span<const Scalar> data() const { return node_->value; }

  /// In-place access for leaves (parameters, optimizer updates). Op outputs
  /// are immutable so recorded backward rules stay valid.
  std::span<Scalar> mutable_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable_data on non-leaf tensor");
    return node_->value;
  }

  std::span<const Scalar> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<Scalar> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad_populated; }
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
    node_->grad_populated = false;
  }

  Scalar item() const {
    if (size() != 1) throw shape_error("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  Scalar operator[](std::size_t i) const { return node_->value.at(i); }

  /// Same values, cut from the graph (the stop-gradient operator).
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Fresh leaf copy with its own storage.
  Tensor clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

  node_type* id() const { return node_.get(); }
  const std::shared_ptr<node_type>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<node_type> node) : node_(std::move(node)) {}

  void check_finite() const {
    for (std::size_t i = 0; i < node_->value.size(); ++i) {
      if (!std::isfinite(node_->value[i])) {
        std::ostringstream os;
        os << "non-finite value " << node_->value[i] << " at flat index " << i
           << " in output of '" << node_->op << "' with shape " << to_string(node_->shape);
        throw numeric_error(os.str());
      }
    }
  }

  std::shared_ptr<node_type> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

// Backward-rule helper: adds `g` into an input's grad if it wants one.
template <typename Scalar>
inline std::span<Scalar> grad_of(Node<Scalar>& self, std::size_t input) {
  auto& in = *self.inputs[input];
  if (!in.requires_grad) return {};
  in.ensure_grad();
  in.grad_populated = true;
  return in.grad;
}

}  // namespace detail

/// Topologically ordered list of the ops reachable from a root.
template <typename Scalar>
class Tape {
 public:
  using node_type = detail::Node<Scalar>;

  explicit Tape(const Tensor<Scalar>& root) : root_(root) {
    if (!root.requires_grad()) return;
    // Iterative post-order DFS; inputs land before their consumers.
    std::unordered_set<const node_type*> seen;
    std::vector<std::pair<node_type*, std::size_t>> stack;
    stack.emplace_back(root.id(), 0);
    seen.insert(root.id());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        node_type* child = node->inputs[next++].get();
        if (child->requires_grad && !child->is_leaf() && seen.insert(child).second)
          stack.emplace_back(child, 0);
        continue;
      }
      if (!node->is_leaf()) ops_.push_back(node);
      stack.pop_back();
    }
  }

  std::span<node_type* const> ops() const { return ops_; }
  std::size_t size() const { return ops_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs every backward rule once, in reverse.
  /// Intermediate grads are scratch per call; leaf grads accumulate.
  void backward() {
    if (root_.size() != 1)
      throw shape_error("backward: loss must be scalar, got shape " + to_string(root_.shape()));
    if (!root_.requires_grad()) return;
    for (auto* op : ops_) {
      op->grad.assign(op->value.size(), Scalar(0));
    }
    auto* root = root_.id();
    root->ensure_grad();
    root->grad[0] += Scalar(1);
    root->grad_populated = true;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)->backward(**it);
  }

 private:
  Tensor<Scalar> root_;
  std::vector<node_type*> ops_;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Tape<Scalar>(loss).backward();
}

}  // namespace raq
