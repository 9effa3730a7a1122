#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmrc/optim.hpp"
#include "cmrc/rng.hpp"
#include "cmrc/tensor.hpp"

namespace cmrc {

// Memory-vs-current classifier: h -> h -> h/2 -> 1, GELU between layers and a
// sigmoid on the output. Label convention: memory = 1, current = 0.
class Discriminator {
 public:
  Discriminator(std::size_t hidden, Rng& rng);
  static Discriminator zeros(std::size_t hidden);

  // [n, h] -> [n] probabilities.
  Tensor forward(const Tensor& reprs) const;
  // Pre-sigmoid scores, [n].
  Tensor logits(const Tensor& reprs) const;
  double discriminate(std::span<const double> repr) const;

  std::size_t hidden() const { return hidden_; }
  std::vector<Tensor> parameters() const { return {w1_, b1_, w2_, b2_, w3_, b3_}; }
  Tensor& w1() { return w1_; }
  Tensor& b1() { return b1_; }
  Tensor& w2() { return w2_; }
  Tensor& b2() { return b2_; }
  Tensor& w3() { return w3_; }
  Tensor& b3() { return b3_; }

 private:
  Discriminator() = default;
  std::size_t hidden_ = 0;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

enum class MmdKernel { linear, rbf };

struct AdversarialOptions {
  MmdKernel kernel = MmdKernel::linear;
  double rbf_bandwidth = 1.0;  // sigma in exp(-|x-y|^2 / (2 sigma^2))
  double log_floor = 1e-12;
};

// Linear kernel: squared distance between the two batch means.
// RBF kernel: biased empirical MMD^2.
Tensor mmd(const Tensor& memory_reprs, const Tensor& current_reprs, const AdversarialOptions& options = {});

struct AdversarialLosses {
  Tensor bce;                 // -mean log D(m) - mean log(1 - D(c))
  Tensor distance;            // mmd
  Tensor core;                // bce + distance
  Tensor discriminator_loss;  // minimized by the discriminator: bce
  Tensor encoder_loss;        // minimized by the encoder: distance - bce
};

// memory_reprs [M_b, h], current_reprs [n_b, h], both non-empty.
AdversarialLosses adversarial_losses(const Discriminator& disc, const Tensor& memory_reprs,
                                     const Tensor& current_reprs, const AdversarialOptions& options = {});

// One round of the game. (a) updates the discriminator on detached copies of
// the representations, so no encoder gradient is produced; (b) returns the
// encoder-side loss against the updated discriminator for the caller to fold
// into its joint objective. The caller must not step the discriminator on (b).
struct MinimaxStep {
  double discriminator_loss = 0.0;  // before the update
  Tensor encoder_loss;
};
MinimaxStep minimax_step(Discriminator& disc, Adam& disc_optimizer, const Tensor& memory_reprs,
                         const Tensor& current_reprs, const AdversarialOptions& options = {});

// Fraction of rows classified correctly at threshold 0.5.
double discriminator_accuracy(const Discriminator& disc, const Tensor& memory_reprs, const Tensor& current_reprs);

}  // namespace cmrc
