#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace abmll::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
class Tape;

// Dense row-major float64 array with an optional gradient slot.
//
// A Tensor is a cheap handle; copies share the same storage. Values are fixed
// once an operation produces them. Only leaves (tensors not produced by a
// recorded operation) may have their values reassigned, which is how
// optimizers update parameters.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf that participates in differentiation.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  // Empty span when no gradient has been populated.
  std::span<const double> grad() const;
  // Gradient as a tensor of the same shape; zeros when absent.
  Tensor grad_tensor() const;

  // Leaf-only mutation.
  std::span<double> mutable_values();
  void assign(std::span<const double> values);
  void clear_grad();

  // New leaf with copied values and no history.
  Tensor detach() const;
  // Same as detach() but the copy participates in differentiation.
  Tensor clone_parameter() const;

  const Node* id() const { return node_.get(); }

 private:
  friend class Tape;
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(Node&)>);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const Tape* tape = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grad slots.
  std::function<void(Node&)> backward;

  // Adds `delta` into grad, allocating zeros first if needed.
  std::vector<double>& grad_slot();
};

// Records differentiable operations executed on the current thread while it
// is alive. Tapes nest; the innermost one is active.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Reset-then-backward: zeroes the grad of every recorded node and every
  // leaf seen by this tape, then replays the recorded operations in reverse
  // order starting from d(loss)/d(loss) = 1. Calling it twice yields the same
  // gradients; nothing accumulates across calls.
  void backward(const Tensor& loss);

  std::size_t size() const { return ops_.size(); }

 private:
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(Node&)>);
  void record(const std::shared_ptr<Node>& node);

  std::vector<std::shared_ptr<Node>> ops_;
  std::vector<std::shared_ptr<Node>> leaves_;
  std::unordered_set<const Node*> seen_leaves_;
  Tape* previous_;
};

// Builds the output of an operation. When a tape is active and any input
// requires grad, the output is recorded with `backward`; otherwise it is a
// constant and `backward` is dropped.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward);

}  // namespace abmll::num
