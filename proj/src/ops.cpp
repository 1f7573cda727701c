#include <algorithm>
#include <cmath>
#include <numbers>

#include "saldist/tensor.hpp"

namespace saldist {

namespace {

using detail::Node;
using Backward = std::function<void(Node&)>;

Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<Node>> parents, Backward fn) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(name) + " produced a non-finite value");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool tracked =
      grad_enabled() && std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (tracked) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

MatrixMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MatrixMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatrixMap as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_2d(const Tensor& a, const char* op) {
  if (a.dim() != 2) throw TensorError(std::string(op) + " needs a 2-D tensor, got " + shape_string(a.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

void accumulate(Node& parent, const std::vector<double>& g) {
  if (!parent.requires_grad) return;
  for (std::size_t i = 0; i < g.size(); ++i) parent.grad[i] += g[i];
}

// Layout of a reduction along one axis: `groups` independent runs of
// `length` elements, each strided by `stride`.
struct AxisLayout {
  std::size_t groups, length, stride;
  std::size_t start(std::size_t g) const { return stride == 1 ? g * length : g; }
};

AxisLayout axis_layout(const Tensor& a, int axis, const char* op) {
  const int d = static_cast<int>(a.dim());
  if (d > 2) throw TensorError(std::string(op) + " supports 1-D and 2-D tensors");
  if (axis < 0) axis += d;
  if (axis < 0 || axis >= d) throw TensorError(std::string(op) + ": axis out of range");
  if (d == 1) return {1, a.size(), 1};
  const auto r = a.shape()[0], c = a.shape()[1];
  return axis == 1 ? AxisLayout{r, c, 1} : AxisLayout{c, r, c};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const auto n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw TensorError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()));
  }
  std::vector<double> out(n * m);
  as_matrix(out, n, m).noalias() = a.matrix() * b.matrix();
  return make_op("matmul", {n, m}, std::move(out), {a.node(), b.node()}, [n, k, m](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = as_matrix(self.grad, n, m);
    if (pa.requires_grad) as_matrix(pa.grad, n, k).noalias() += g * as_matrix(pb.value, k, m).transpose();
    if (pb.requires_grad) as_matrix(pb.grad, k, m).noalias() += as_matrix(pa.value, n, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const auto r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  as_matrix(out, c, r) = a.matrix().transpose();
  return make_op("transpose", {c, r}, std::move(out), {a.node()}, [r, c](Node& self) {
    auto& pa = *self.parents[0];
    as_matrix(pa.grad, r, c) += as_matrix(self.grad, c, r).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return make_op("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
      accumulate(*self.parents[0], self.grad);
      accumulate(*self.parents[1], self.grad);
    });
  }
  if (b.dim() == 1 && b.size() == a.cols()) {
    const auto cols = a.cols(), rows = a.size() / cols;
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
    return make_op("add", a.shape(), std::move(out), {a.node(), b.node()}, [rows, cols](Node& self) {
      accumulate(*self.parents[0], self.grad);
      auto& pb = *self.parents[1];
      if (!pb.requires_grad) return;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) pb.grad[c] += self.grad[r * cols + c];
    });
  }
  throw TensorError("add: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return make_op("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    auto& pb = *self.parents[1];
    if (!pb.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  if (!std::isfinite(s)) throw TensorError("mul_scalar: factor must be finite");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  return make_op("mul_scalar", a.shape(), std::move(out), {a.node()}, [s](Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += s * self.grad[i];
  });
}

Tensor embedding_gather(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding_gather");
  if (ids.empty()) throw TensorError("embedding_gather: empty id list");
  const auto vocab = table.shape()[0], d = table.shape()[1];
  std::vector<int> rows(ids.begin(), ids.end());
  for (int id : rows) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw TensorError("embedding_gather: id " + std::to_string(id) + " outside table of " +
                        std::to_string(vocab) + " rows");
    }
  }
  std::vector<double> out(rows.size() * d);
  const auto tv = table.values();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  const auto n = rows.size();
  return make_op("embedding_gather", {n, d}, std::move(out), {table.node()},
                 [rows = std::move(rows), d](Node& self) {
                   auto& pt = *self.parents[0];
                   for (std::size_t i = 0; i < rows.size(); ++i)
                     for (std::size_t c = 0; c < d; ++c) pt.grad[rows[i] * d + c] += self.grad[i * d + c];
                 });
}

Tensor softmax(const Tensor& a, int axis) {
  const auto L = axis_layout(a, axis, "softmax");
  std::vector<double> out(a.size());
  const auto v = a.values();
  for (std::size_t g = 0; g < L.groups; ++g) {
    const auto s = L.start(g);
    double mx = v[s];
    for (std::size_t i = 1; i < L.length; ++i) mx = std::max(mx, v[s + i * L.stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < L.length; ++i) {
      const auto idx = s + i * L.stride;
      out[idx] = std::exp(v[idx] - mx);
      z += out[idx];
    }
    for (std::size_t i = 0; i < L.length; ++i) out[s + i * L.stride] /= z;
  }
  return make_op("softmax", a.shape(), std::move(out), {a.node()}, [L](Node& self) {
    auto& pa = *self.parents[0];
    const auto& y = self.value;
    for (std::size_t g = 0; g < L.groups; ++g) {
      const auto s = L.start(g);
      double dot = 0.0;
      for (std::size_t i = 0; i < L.length; ++i) dot += self.grad[s + i * L.stride] * y[s + i * L.stride];
      for (std::size_t i = 0; i < L.length; ++i) {
        const auto idx = s + i * L.stride;
        pa.grad[idx] += y[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, int axis) {
  const auto L = axis_layout(a, axis, "log_softmax");
  std::vector<double> out(a.size());
  const auto v = a.values();
  for (std::size_t g = 0; g < L.groups; ++g) {
    const auto s = L.start(g);
    double mx = v[s];
    for (std::size_t i = 1; i < L.length; ++i) mx = std::max(mx, v[s + i * L.stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < L.length; ++i) z += std::exp(v[s + i * L.stride] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < L.length; ++i) out[s + i * L.stride] = v[s + i * L.stride] - lse;
  }
  return make_op("log_softmax", a.shape(), std::move(out), {a.node()}, [L](Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t g = 0; g < L.groups; ++g) {
      const auto s = L.start(g);
      double total = 0.0;
      for (std::size_t i = 0; i < L.length; ++i) total += self.grad[s + i * L.stride];
      for (std::size_t i = 0; i < L.length; ++i) {
        const auto idx = s + i * L.stride;
        pa.grad[idx] += self.grad[idx] - std::exp(self.value[idx]) * total;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.cols();
  if (gamma.dim() != 1 || beta.dim() != 1 || gamma.size() != d || beta.size() != d) {
    throw TensorError("layer_norm: gamma/beta must be vectors of size " + std::to_string(d));
  }
  const auto rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), rstd(rows);
  const auto v = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += v[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (v[r * d + c] - mu) * (v[r * d + c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const auto i = r * d + c;
      xhat[i] = (v[i] - mu) * rstd[r];
      out[i] = xhat[i] * gamma[c] + beta[c];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                 [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                   auto& px = *self.parents[0];
                   auto& pg = *self.parents[1];
                   auto& pb = *self.parents[2];
                   const double inv_d = 1.0 / static_cast<double>(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double mean_gy = 0.0, mean_gyx = 0.0;
                     for (std::size_t c = 0; c < d; ++c) {
                       const auto i = r * d + c;
                       const double gy = self.grad[i] * pg.value[c];
                       mean_gy += gy;
                       mean_gyx += gy * xhat[i];
                       if (pg.requires_grad) pg.grad[c] += self.grad[i] * xhat[i];
                       if (pb.requires_grad) pb.grad[c] += self.grad[i];
                     }
                     if (!px.requires_grad) continue;
                     mean_gy *= inv_d;
                     mean_gyx *= inv_d;
                     for (std::size_t c = 0; c < d; ++c) {
                       const auto i = r * d + c;
                       const double gy = self.grad[i] * pg.value[c];
                       px.grad[i] += rstd[r] * (gy - mean_gy - xhat[i] * mean_gyx);
                     }
                   }
                 });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * v[i] * (1.0 + std::erf(v[i] * std::numbers::sqrt2 / 2.0));
  return make_op("gelu", a.shape(), std::move(out), {a.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = pa.value[i];
      const double d = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      pa.grad[i] += self.grad[i] * d;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size() || std::find(shape.begin(), shape.end(), 0u) != shape.end()) {
    throw TensorError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {a.node()},
                 [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const auto d = parts[0].dim();
  if (d > 2) throw TensorError("concat supports 1-D and 2-D tensors");
  if (axis < 0) axis += static_cast<int>(d);
  if (axis < 0 || axis >= static_cast<int>(d)) throw TensorError("concat: axis out of range");
  for (const auto& p : parts) {
    if (p.dim() != d) throw TensorError("concat: inputs differ in rank");
  }
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) parents.push_back(p.node());

  if (d == 1 || axis == 0) {
    const auto cols = parts[0].cols();
    std::size_t rows = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
      if (p.cols() != cols) throw TensorError("concat: column counts differ along axis 0");
      rows += p.rows();
      out.insert(out.end(), p.values().begin(), p.values().end());
    }
    Shape shape = d == 1 ? Shape{out.size()} : Shape{rows, cols};
    return make_op("concat", std::move(shape), std::move(out), std::move(parents), [](Node& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad)
          for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[offset + i];
        offset += p->value.size();
      }
    });
  }

  const auto rows = parts[0].shape()[0];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[0] != rows) throw TensorError("concat: row counts differ along axis 1");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  std::vector<double> out(rows * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    as_matrix(out, rows, total).middleCols(static_cast<Eigen::Index>(col), static_cast<Eigen::Index>(widths[k])) =
        parts[k].matrix();
    col += widths[k];
  }
  return make_op("concat", {rows, total}, std::move(out), std::move(parents),
                 [rows, total, widths = std::move(widths)](Node& self) {
                   const auto g = as_matrix(self.grad, rows, total);
                   std::size_t c = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     auto& p = *self.parents[k];
                     if (p.requires_grad)
                       as_matrix(p.grad, rows, widths[k]) +=
                           g.middleCols(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(widths[k]));
                     c += widths[k];
                   }
                 });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_2d(a, "slice_cols");
  const auto rows = a.shape()[0], cols = a.shape()[1];
  if (count == 0 || begin + count > cols) throw TensorError("slice_cols: range outside " + shape_string(a.shape()));
  std::vector<double> out(rows * count);
  as_matrix(out, rows, count) =
      a.matrix().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return make_op("slice_cols", {rows, count}, std::move(out), {a.node()}, [rows, cols, begin, count](Node& self) {
    auto& pa = *self.parents[0];
    as_matrix(pa.grad, rows, cols).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        as_matrix(self.grad, rows, count);
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op("sum", {1}, {s}, {a.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.size());
  return make_op("mean", {1}, {s / n}, {a.node()}, [n](Node& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad) g += self.grad[0] / n;
  });
}

Tensor pick(const Tensor& a, std::span<const int> cols) {
  require_2d(a, "pick");
  const auto rows = a.shape()[0], width = a.shape()[1];
  if (cols.size() != rows) throw TensorError("pick: need one column index per row");
  std::vector<int> idx(cols.begin(), cols.end());
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= width) throw TensorError("pick: column index out of range");
    out[r] = a[r * width + static_cast<std::size_t>(idx[r])];
  }
  return make_op("pick", {rows}, std::move(out), {a.node()}, [idx = std::move(idx), width](Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t r = 0; r < idx.size(); ++r) pa.grad[r * width + static_cast<std::size_t>(idx[r])] += self.grad[r];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::optional<int> ignore_id) {
  if (logits.dim() > 2) throw TensorError("cross_entropy: logits must be 1-D or 2-D");
  const auto rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw TensorError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                      " logit rows");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> probs(logits.size());
  const auto v = logits.values();
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const bool skip = ignore_id && tgt[r] == *ignore_id;
    if (!skip && (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab)) {
      throw TensorError("cross_entropy: target id " + std::to_string(tgt[r]) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
    const double* row = v.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] = std::exp(row[c] - mx) / z;
    if (skip) continue;
    loss -= row[tgt[r]] - mx - std::log(z);
    ++counted;
  }
  if (counted == 0) throw TensorError("cross_entropy: no non-ignored targets");
  const double n = static_cast<double>(counted);
  return make_op("cross_entropy", {1}, {loss / n}, {logits.node()},
                 [tgt = std::move(tgt), probs = std::move(probs), ignore_id, vocab, n](Node& self) {
                   auto& pl = *self.parents[0];
                   const double g = self.grad[0] / n;
                   for (std::size_t r = 0; r < tgt.size(); ++r) {
                     if (ignore_id && tgt[r] == *ignore_id) continue;
                     for (std::size_t c = 0; c < vocab; ++c) pl.grad[r * vocab + c] += g * probs[r * vocab + c];
                     pl.grad[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
                   }
                 });
}

}  // namespace saldist
