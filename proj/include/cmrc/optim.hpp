#pragma once

#include <vector>

#include "cmrc/tensor.hpp"

namespace cmrc {

struct AdamOptions {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters without a gradient buffer are
// treated as having a zero gradient for the step.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step();
  void zero_grad();
  const AdamOptions& options() const { return options_; }
  long steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

// Flat views over a parameter list, used by gradient-projection methods.
std::vector<double> flatten_grads(const std::vector<Tensor>& params);
void assign_grads(std::vector<Tensor>& params, const std::vector<double>& flat);

}  // namespace cmrc
