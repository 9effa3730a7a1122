#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmrc/tensor.hpp"

namespace cmrc {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must rebuild its graph on every call. NaN anywhere reports +inf.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

// Same check over several leaves at once; f closes over them.
double finite_difference_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps = 1e-5);

struct GradcheckResult {
  std::string name;
  double max_rel_error;
  bool passed;
};

// Finite-difference suite over every loss in the training objective on
// small random instances (sequence length <= 8, hidden <= 8).
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-4);

}  // namespace cmrc
