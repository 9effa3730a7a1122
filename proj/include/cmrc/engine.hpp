#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmrc/adversarial.hpp"
#include "cmrc/backbone.hpp"
#include "cmrc/data.hpp"
#include "cmrc/distill.hpp"
#include "cmrc/memory.hpp"
#include "cmrc/metrics.hpp"

namespace cmrc {

enum class Method { ma_mrc, lower, upper, ewc, online_ewc, agem, der, derpp };

std::string to_string(Method m);
std::string to_string(NormStrategy s);
std::string to_string(UncertaintyKind k);
std::string to_string(MmdKernel k);
Method parse_method(const std::string& s);
NormStrategy parse_norm(const std::string& s);
UncertaintyKind parse_uncertainty(const std::string& s);
MmdKernel parse_kernel(const std::string& s);

struct LossWeights {
  double adv = 1.0;
  double kl = 1.0;
  double ewc_lambda = 10.0;
  double online_gamma = 0.95;
  double der_alpha = 0.5;
  double derpp_beta = 0.5;
  bool operator==(const LossWeights&) const = default;
};

struct ContinualConfig {
  Method method = Method::ma_mrc;
  std::size_t memory_capacity = 60;
  NormStrategy norm = NormStrategy::norm1;
  UncertaintyKind uncertainty = UncertaintyKind::entropy;
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  std::vector<std::size_t> order;  // empty: stream order
  std::uint64_t seed = 0;
  LossWeights weights;
  std::size_t max_answer_len = 16;
  double memory_fraction = 0.25;  // share of each batch drawn from memory
  std::size_t fisher_samples = 256;
  double kl_temperature = 1.0;
  MmdKernel mmd_kernel = MmdKernel::linear;
  double rbf_bandwidth = 1.0;
  ModelConfig model;

  // Throws std::invalid_argument when the order is not a permutation of
  // 0..domains-1 or a numeric field is out of range.
  void validate(std::size_t domains) const;
  bool operator==(const ContinualConfig&) const = default;
};

nlohmann::ordered_json config_to_json(const ContinualConfig& config);
// Keys absent from `j` keep their defaults; unknown keys are rejected.
ContinualConfig config_from_json(const nlohmann::json& j, ContinualConfig base = {});
std::uint64_t config_hash(const ContinualConfig& config);
std::string hex64(std::uint64_t v);

// Per-parameter diagonal Fisher estimate and the anchor it was taken at.
struct FisherState {
  std::vector<Tensor> fisher;
  std::vector<Tensor> anchor;
};

// Mean squared per-sample gradient of the span loss over up to `max_samples`
// samples (the first ones of a seeded shuffle).
FisherState estimate_fisher(const BackboneModel& model, std::span<const Sample> samples, std::size_t max_samples,
                            Rng& rng);
// (lambda / 2) * sum_k sum_i F_k,i (theta_i - anchor_k,i)^2.
Tensor ewc_penalty(const std::vector<Tensor>& params, std::span<const FisherState> states, double lambda);
// F <- gamma * F_old + F_new, anchor <- new anchor.
FisherState merge_online(const std::optional<FisherState>& old, const FisherState& fresh, double gamma);

// Returns g when g.g_ref >= 0 or |g_ref| = 0, else the projection of g onto
// the half-space g'.g_ref >= 0.
std::vector<double> agem_project(std::span<const double> g, std::span<const double> g_ref);

// Mean over positions of (cached - current)^2, start and end heads summed.
Tensor logit_mse(const CachedLogits& cached, const SpanDistribution& current);
// alpha * mean logit_mse over `batch`; items without cached logits are skipped
// with a warning. An all-skipped batch yields a constant zero.
Tensor der_loss(const BackboneModel& model, std::span<const MemoryItem* const> batch, double alpha);
// der_loss plus beta * mean span loss on the same items' gold spans.
Tensor derpp_loss(const BackboneModel& model, std::span<const MemoryItem* const> batch, double alpha, double beta);

double evaluate_domain_f1(const BackboneModel& model, std::span<const Sample> test, std::size_t max_answer_len,
                          double* em = nullptr);
DomainScore evaluate_domain(const BackboneModel& model, const DomainSamples& domain, std::size_t index,
                            std::size_t max_answer_len);

// What an observer sees at the end of a step.
struct StepContext {
  std::size_t step = 0;
  std::size_t domain = 0;
  const BackboneModel* model = nullptr;
  const Memory* memory = nullptr;                 // after the post-step update
  const Discriminator* discriminator = nullptr;   // adversarial method only
  const StepReport* report = nullptr;
  std::size_t trained_samples = 0;                // distinct samples seen by the optimizer this step
};

struct UpdateContext {
  std::size_t step = 0;
  const BackboneModel* model = nullptr;
  const TeacherSnapshot* teacher = nullptr;  // adversarial method, steps >= 1
  double loss = 0.0;                         // objective value of the batch just applied
};

struct RunHooks {
  std::function<void(const StepContext&)> on_step_end;
  // Called for every training sample fed to a loss, with the step it was used in.
  std::function<void(std::size_t step, const Sample&)> on_train_sample;
  // Called after every optimizer step.
  std::function<void(const UpdateContext&)> on_update;
};

struct RunOptions {
  std::optional<std::filesystem::path> state_dir;  // enables checkpointing and resume
  std::optional<std::size_t> stop_after_steps;     // simulate an interruption
};

struct RunResult {
  BackboneModel model;
  Memory memory;
  EvalReport report;
  std::vector<double> step_seconds;
};

// Visits the domains in config order, trains with the configured method and
// evaluates on every seen test split after each step.
RunResult run_stream(const std::vector<DomainSamples>& data, const ContinualConfig& config, const RunHooks& hooks = {},
                     const RunOptions& options = {});

// Builds the model-config-aware stream view: assembles records with the
// model's max_len and sets the vocabulary size.
std::vector<DomainSamples> prepare_stream(const DomainStream& stream, ContinualConfig& config);

}  // namespace cmrc
