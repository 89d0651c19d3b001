#include "abmll/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "abmll/errors.hpp"

namespace abmll::num {

namespace {
thread_local Tape* g_active_tape = nullptr;

void check_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw DomainError("tensor value is not finite");
  }
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<double>& Node::grad_slot() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  check_finite(values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) on shape " + shape_string(shape()));
  return node_->value[row * node_->shape[1] + col];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_->backward; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return zeros(shape());
  return from(shape(), node_->grad);
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw ContractError("only leaf tensors may be mutated");
  return node_->value;
}

void Tensor::assign(std::span<const double> values) {
  auto dst = mutable_values();
  if (values.size() != dst.size()) {
    throw DimensionError("assign of " + std::to_string(values.size()) + " values into shape " +
                         shape_string(shape()));
  }
  std::copy(values.begin(), values.end(), dst.begin());
}

void Tensor::clear_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->value); }

Tensor Tensor::clone_parameter() const { return parameter(shape(), node_->value); }

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const std::shared_ptr<Node>& node) {
  for (const auto& parent : node->parents) {
    if (parent->requires_grad && !parent->backward && seen_leaves_.insert(parent.get()).second) {
      leaves_.push_back(parent);
    }
  }
  node->tape = this;
  ops_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  for (auto& leaf : leaves_) leaf->grad.assign(leaf->value.size(), 0.0);
  for (auto& op : ops_) op->grad.assign(op->value.size(), 0.0);
  const Node* root = loss.id();
  if (!root->requires_grad) return;  // constant loss: every gradient stays zero
  if (root->tape != this) throw ContractError("loss was not produced under this tape");

  auto it = std::find_if(ops_.rbegin(), ops_.rend(),
                         [root](const auto& n) { return n.get() == root; });
  it->get()->grad[0] = 1.0;
  for (; it != ops_.rend(); ++it) {
    Node& node = **it;
    if (node.backward) node.backward(node);
  }
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  Tape* tape = Tape::active();
  const bool differentiable =
      tape && std::any_of(inputs.begin(), inputs.end(),
                          [](const Tensor& t) { return t.requires_grad(); });
  if (differentiable) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_);
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

}  // namespace abmll::num
