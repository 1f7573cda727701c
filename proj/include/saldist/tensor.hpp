#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "saldist/errors.hpp"

namespace saldist {

using Shape = std::vector<std::size_t>;
using TokenIds = std::vector<int>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty when the tensor does not require grad
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Adds this node's grad into the grads of its parents.
  std::function<void(Node&)> backward;
};

}  // namespace detail

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of 64-bit reals with an optional gradient slot.
///
/// A Tensor is a cheap handle: copies share storage and graph position.
/// Operations on tensors that require grad record themselves so that
/// backward() can replay them in reverse. The graph lives exactly as long
/// as some handle to its output is alive.
class Tensor {
 public:
  Tensor() = default;

  /// Throws TensorError on shape/length mismatch, zero-sized dimensions or
  /// non-finite values.
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node_->value; }
  /// Writes bypass the graph; only meant for leaves (parameters, inputs).
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  ConstMatrixMap matrix() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();

  /// Leaf copy of the current values, cut from any graph.
  Tensor detach(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Reverse sweep from a single-element root. Leaves accumulate into their
/// grad slot across calls; interior grads are recomputed on every call.
void backward(const Tensor& root);

// Operations. Every op records itself when any input requires grad.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Same shape, or b a vector broadcast along the last axis of a (bias add).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor embedding_gather(const Tensor& table, std::span<const int> ids);
/// axis -1 means the last axis.
Tensor softmax(const Tensor& a, int axis = -1);
Tensor log_softmax(const Tensor& a, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// out[j] = a[j, cols[j]] for a 2-D tensor.
Tensor pick(const Tensor& a, std::span<const int> cols);
/// Mean token-level cross-entropy over rows whose target != ignore_id.
/// Throws TensorError on out-of-range targets or when no row is counted.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::optional<int> ignore_id = std::nullopt);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

/// Max over elements of |analytic - central| / (|analytic| + |central| + 1e-12).
/// f is evaluated at copies of x; throws Error if two evaluations at the same
/// point disagree.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Same check for a leaf that f reads implicitly (e.g. a model parameter).
/// Only the listed flat indices are probed; all of them when empty.
double grad_check_inplace(const std::function<Tensor()>& f, Tensor& param, double eps = 1e-5,
                          std::span<const std::size_t> indices = {});

}  // namespace saldist
