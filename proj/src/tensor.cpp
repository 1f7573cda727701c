#include "saldist/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace saldist {

namespace {
thread_local int no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw TensorError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw TensorError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw TensorError("tensor of shape " + shape_string(shape) + " needs " +
                      std::to_string(shape_size(shape)) + " values, got " +
                      std::to_string(values.size()));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw TensorError("tensor values must be finite");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({1}, {v}, requires_grad); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::vector<double>(values), requires_grad);
}

std::size_t Tensor::rows() const { return dim() == 1 ? 1 : node_->shape[0]; }

std::size_t Tensor::cols() const { return node_->shape.back(); }

double Tensor::item() const {
  if (size() != 1) throw TensorError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->value[0];
}

ConstMatrixMap Tensor::matrix() const {
  return ConstMatrixMap(node_->value.data(), static_cast<Eigen::Index>(size() / cols()),
                        static_cast<Eigen::Index>(cols()));
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

void backward(const Tensor& root) {
  if (!root.defined()) throw TensorError("backward on an undefined tensor");
  if (root.size() != 1) throw TensorError("backward root must be a scalar, got " + shape_string(root.shape()));
  if (!root.requires_grad()) throw TensorError("backward root is not attached to a graph");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->leaf && n->backward) n->backward(*n);
  }
  for (auto* n : order) {
    for (double g : n->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient during backward");
    }
  }
}

}  // namespace saldist
