#include "cmrc/adversarial.hpp"

#include <cmath>
#include <stdexcept>

namespace cmrc {

namespace {

Tensor init_matrix(std::size_t in, std::size_t out, Rng& rng) {
  Tensor t = Tensor::zeros({in, out}, true);
  const double std = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : t.mutable_data()) v = rng.truncated_normal(std);
  return t;
}

void check_batch(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": representation batches must be [n x h] with equal h, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

}  // namespace

Discriminator::Discriminator(std::size_t hidden, Rng& rng) : hidden_(hidden) {
  if (hidden < 2) throw std::invalid_argument("Discriminator: hidden size must be at least 2");
  const std::size_t half = hidden / 2;
  w1_ = init_matrix(hidden, hidden, rng);
  b1_ = Tensor::zeros({hidden}, true);
  w2_ = init_matrix(hidden, half, rng);
  b2_ = Tensor::zeros({half}, true);
  w3_ = init_matrix(half, 1, rng);
  b3_ = Tensor::zeros({1}, true);
}

Discriminator Discriminator::zeros(std::size_t hidden) {
  if (hidden < 2) throw std::invalid_argument("Discriminator: hidden size must be at least 2");
  Discriminator d;
  d.hidden_ = hidden;
  const std::size_t half = hidden / 2;
  d.w1_ = Tensor::zeros({hidden, hidden}, true);
  d.b1_ = Tensor::zeros({hidden}, true);
  d.w2_ = Tensor::zeros({hidden, half}, true);
  d.b2_ = Tensor::zeros({half}, true);
  d.w3_ = Tensor::zeros({half, 1}, true);
  d.b3_ = Tensor::zeros({1}, true);
  return d;
}

Tensor Discriminator::logits(const Tensor& reprs) const {
  if (reprs.dim() != 2 || reprs.cols() != hidden_) {
    throw std::invalid_argument("Discriminator: expected [n x " + std::to_string(hidden_) + "], got " +
                                shape_str(reprs.shape()));
  }
  using namespace ops;
  const Tensor z1 = gelu(add(matmul(reprs, w1_), b1_));
  const Tensor z2 = gelu(add(matmul(z1, w2_), b2_));
  const Tensor z3 = add(matmul(z2, w3_), b3_);
  return reshape(z3, {reprs.rows()});
}

Tensor Discriminator::forward(const Tensor& reprs) const { return ops::sigmoid(logits(reprs)); }

double Discriminator::discriminate(std::span<const double> repr) const {
  NoGradGuard no_grad;
  return forward(Tensor::from({1, repr.size()}, std::vector<double>(repr.begin(), repr.end()))).item();
}

Tensor mmd(const Tensor& memory_reprs, const Tensor& current_reprs, const AdversarialOptions& options) {
  check_batch("mmd", memory_reprs, current_reprs);
  using namespace ops;
  if (options.kernel == MmdKernel::linear) {
    return sum(square(sub(mean_rows(memory_reprs), mean_rows(current_reprs))));
  }
  const double gamma = -1.0 / (2.0 * options.rbf_bandwidth * options.rbf_bandwidth);
  auto kernel_mean = [&](const Tensor& a, const Tensor& b) { return mean(exp(scale(pairwise_sq_dist(a, b), gamma))); };
  return add(add(kernel_mean(memory_reprs, memory_reprs), kernel_mean(current_reprs, current_reprs)),
             scale(kernel_mean(memory_reprs, current_reprs), -2.0));
}

AdversarialLosses adversarial_losses(const Discriminator& disc, const Tensor& memory_reprs,
                                     const Tensor& current_reprs, const AdversarialOptions& options) {
  check_batch("adversarial_losses", memory_reprs, current_reprs);
  using namespace ops;
  const Tensor d_mem = disc.forward(memory_reprs);
  const Tensor d_cur = disc.forward(current_reprs);
  AdversarialLosses out;
  out.bce = neg(add(mean(log(d_mem, options.log_floor)), mean(log(affine(d_cur, -1.0, 1.0), options.log_floor))));
  out.distance = mmd(memory_reprs, current_reprs, options);
  out.core = add(out.bce, out.distance);
  out.discriminator_loss = out.bce;
  out.encoder_loss = sub(out.distance, out.bce);
  return out;
}

MinimaxStep minimax_step(Discriminator& disc, Adam& disc_optimizer, const Tensor& memory_reprs,
                         const Tensor& current_reprs, const AdversarialOptions& options) {
  MinimaxStep step;
  {
    const AdversarialLosses frozen_encoder =
        adversarial_losses(disc, memory_reprs.detach(), current_reprs.detach(), options);
    step.discriminator_loss = frozen_encoder.discriminator_loss.item();
    disc_optimizer.zero_grad();
    backward(frozen_encoder.discriminator_loss);
    disc_optimizer.step();
    disc_optimizer.zero_grad();
  }
  step.encoder_loss = adversarial_losses(disc, memory_reprs, current_reprs, options).encoder_loss;
  return step;
}

double discriminator_accuracy(const Discriminator& disc, const Tensor& memory_reprs, const Tensor& current_reprs) {
  NoGradGuard no_grad;
  const Tensor pm = disc.forward(memory_reprs);
  const Tensor pc = disc.forward(current_reprs);
  std::size_t correct = 0;
  for (double p : pm.data()) correct += p > 0.5 ? 1 : 0;
  for (double p : pc.data()) correct += p < 0.5 ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pm.numel() + pc.numel());
}

}  // namespace cmrc
