#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cmrc/backbone.hpp"
#include "cmrc/data.hpp"
#include "cmrc/rng.hpp"

namespace cmrc {

enum class UncertaintyKind { entropy, prob, random };
enum class NormStrategy { norm1, norm2 };

struct CachedLogits {
  std::vector<double> start;
  std::vector<double> end;
};

struct MemoryItem {
  Sample sample;
  int origin_step = 0;  // continual step (0-based) at which the item entered memory
  double best_uncertainty = 0.0;  // running maximum of observed u
  double last_uncertainty = 0.0;
  std::optional<CachedLogits> teacher_logits;
};

struct Memory {
  std::size_t capacity = 0;
  std::vector<MemoryItem> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  std::map<int, std::size_t> counts_by_step() const;
};

struct MemoryOptions {
  NormStrategy norm = NormStrategy::norm1;
  UncertaintyKind kind = UncertaintyKind::entropy;
  double epsilon = 1e-6;
  bool softmax_weights = false;  // alternative normalization of the differentials
  bool cache_logits = true;      // store the current model's logits on insertion
};

// Uncertainty of a model on one sample; does not touch any memory item.
//   entropy: log p_start[y_s] + log p_end[y_e]
//   prob:    max_i p_start[i] + max_j p_end[j]
double uncertainty(const BackboneModel& model, const Sample& sample, UncertaintyKind kind);

// Measures u, stores it as last_uncertainty and folds it into best_uncertainty.
double compute_uncertainty(const BackboneModel& model, MemoryItem& item, UncertaintyKind kind);

// Retention distribution over the items of one origin step.
//   norm1: best_i - last_i
//   norm2: pooled_mean_last - last_i, pooled over all of memory
// Weights are max(diff, 0) + epsilon, normalized to sum to 1.
std::vector<double> retention_weights(std::span<const MemoryItem* const> items, NormStrategy strategy,
                                      double pooled_mean_last, const MemoryOptions& options = {});

// Per-slot quotas for t slots sharing `capacity`; the remainder goes one each
// to the lowest-numbered slots.
std::vector<std::size_t> memory_quotas(std::size_t capacity, std::size_t slots);

// k indices drawn without replacement, each draw proportional to the
// remaining weights.
std::vector<std::size_t> weighted_sample_without_replacement(std::span<const double> weights, std::size_t k, Rng& rng);

// Uniform sample of min(capacity, |domain|) items from the first domain.
// With a model, uncertainties (and logits, if requested) are initialized from it.
Memory init_memory(std::span<const Sample> first_domain, std::size_t capacity, Rng& rng,
                   const BackboneModel* model = nullptr, const MemoryOptions& options = {});

// Rebalances memory after finishing step `step` (0-based, >= 1) with `model`:
// refreshes uncertainties, keeps a weighted quota from each earlier step's
// items, and fills the newest quota uniformly from `current`.
Memory update_memory(const Memory& memory, std::span<const Sample> current, const BackboneModel& model,
                     std::size_t step, Rng& rng, const MemoryOptions& options = {});

CachedLogits cache_logits(const BackboneModel& model, const Sample& sample);

// Dataset jsonl records plus a "memory" block (origin_step, uncertainties,
// cached logits). Samples are written already assembled.
void save_memory_jsonl(const std::filesystem::path& path, const Memory& memory);
Memory load_memory_jsonl(const std::filesystem::path& path, std::size_t capacity);

}  // namespace cmrc
