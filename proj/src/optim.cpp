#include "cmrc/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cmrc {

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<double> flatten_grads(const std::vector<Tensor>& params) {
  std::vector<double> flat;
  for (const auto& p : params) {
    if (p.has_grad()) {
      flat.insert(flat.end(), p.grad().begin(), p.grad().end());
    } else {
      flat.insert(flat.end(), p.numel(), 0.0);
    }
  }
  return flat;
}

void assign_grads(std::vector<Tensor>& params, const std::vector<double>& flat) {
  std::size_t offset = 0;
  for (auto& p : params) {
    auto g = p.mutable_grad();
    if (offset + g.size() > flat.size()) throw std::invalid_argument("assign_grads: flat gradient too short");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = flat[offset + i];
    offset += g.size();
  }
  if (offset != flat.size()) throw std::invalid_argument("assign_grads: flat gradient too long");
}

}  // namespace cmrc
