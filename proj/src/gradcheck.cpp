#include "cmrc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cmrc {

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  x.set_requires_grad(true);
  return finite_difference_check([&]() { return f(x); }, {x}, eps);
}

double finite_difference_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps) {
  constexpr double kFail = std::numeric_limits<double>::infinity();
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  const Tensor root = f();
  if (!root.all_finite()) return kFail;
  backward(root);

  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + eps;
      const double up = f().item();
      values[i] = original - eps;
      const double down = f().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) return kFail;
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace cmrc
