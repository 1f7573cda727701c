#include <cmath>
#include <numeric>

#include "saldist/tensor.hpp"

namespace saldist {

namespace {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

double evaluate(const std::function<Tensor()>& f) {
  const Tensor out = f();
  return out.item();
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw TensorError("grad_check: eps must be positive");
  Tensor probe = x.detach(true);
  return grad_check_inplace([&] { return f(probe); }, probe, eps);
}

double grad_check_inplace(const std::function<Tensor()>& f, Tensor& param, double eps,
                          std::span<const std::size_t> indices) {
  if (!(eps > 0.0)) throw TensorError("grad_check: eps must be positive");
  if (!param.requires_grad()) throw TensorError("grad_check: probed tensor must require grad");

  const double first = evaluate(f);
  const double second = evaluate(f);
  if (first != second) throw Error("grad_check: function is not deterministic");

  param.zero_grad();
  const Tensor root = f();
  std::vector<double> analytic(param.size(), 0.0);
  if (root.requires_grad()) {
    backward(root);
    analytic.assign(param.grad().begin(), param.grad().end());
  }
  param.zero_grad();

  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(param.size());
    std::iota(all.begin(), all.end(), 0);
    indices = all;
  }

  auto values = param.mutable_values();
  double worst = 0.0;
  for (std::size_t i : indices) {
    if (i >= values.size()) throw TensorError("grad_check: probe index out of range");
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = evaluate(f);
    values[i] = saved - eps;
    const double down = evaluate(f);
    values[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

}  // namespace saldist
