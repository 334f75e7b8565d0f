#include "stylevox/gradcheck.hpp"

#include <cmath>
#include <span>

#include "stylevox/autodiff.hpp"

namespace sv {

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& inputs, double step) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (t.dtype() != DType::F64)
      throw std::invalid_argument("grad_check: f64 inputs required");
    leaves.push_back(ad::make_leaf(t.clone()));
  }

  Tensor out = fn(leaves);
  if (out.numel() != 1) throw std::invalid_argument("grad_check: fn must return a scalar");
  std::vector<Tensor> analytic = ad::gradient(out, leaves);

  double max_err = 0.0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    Tensor& leaf = leaves[i];
    for (int64_t j = 0; j < leaf.numel(); ++j) {
      const double saved = leaf.at(j);
      leaf.set(j, saved + step);
      const double f_plus = fn(leaves).item();
      leaf.set(j, saved - step);
      const double f_minus = fn(leaves).item();
      leaf.set(j, saved);
      const double fd = (f_plus - f_minus) / (2.0 * step);
      const double err = std::abs(analytic[i].at(j) - fd) / std::max(1.0, std::abs(fd));
      if (err > max_err) max_err = err;
    }
  }
  return max_err;
}

}  // namespace sv
