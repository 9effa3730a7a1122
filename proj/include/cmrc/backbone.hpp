#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmrc/rng.hpp"
#include "cmrc/tensor.hpp"

namespace cmrc {

struct ModelConfig {
  std::size_t vocab_size = 200;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_len = 64;
  std::size_t ffn_mult = 4;
  double init_std = 0.02;

  // 12 blocks, h=768, 12 heads, sequences of 384; kept for reference, too
  // large for the from-scratch trainer here.
  static ModelConfig full_scale(std::size_t vocab_size);
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Start/end logits over the l input positions plus their softmaxes.
struct SpanDistribution {
  Tensor start_logits;
  Tensor end_logits;
  std::vector<double> p_start;
  std::vector<double> p_end;

  std::size_t length() const { return p_start.size(); }
  static SpanDistribution from_logits(Tensor start_logits, Tensor end_logits);
};

// Transformer encoder (post-norm blocks) with linear start/end heads.
class BackboneModel {
 public:
  BackboneModel(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }

  // H_L, shape [l, hidden]. Rejects sequences longer than max_len.
  Tensor encode(std::span<const int> input_ids) const;
  SpanDistribution predict_spans(const Tensor& encoded) const;
  SpanDistribution forward(std::span<const int> input_ids) const { return predict_spans(encode(input_ids)); }

  const std::vector<NamedTensor>& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> encoder_parameters() const;  // everything except the span heads
  Tensor& parameter(const std::string& name);
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  // Deep copy with fresh storage.
  BackboneModel clone(bool requires_grad = true) const;
  void copy_values_from(const BackboneModel& other);
  void zero_grad();

 private:
  BackboneModel() = default;
  void add_param(std::string name, Shape shape, Rng* rng, double fill);

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

// -log p_start[y_s] - log p_end[y_e] for one sample.
Tensor span_loss(const SpanDistribution& dist, int y_start, int y_end);

// argmax p_start[i] * p_end[j] over i <= j < i + max_answer_len; ties go to
// the smaller i, then the smaller j.
std::pair<int, int> decode_answer(std::span<const double> p_start, std::span<const double> p_end,
                                  std::size_t max_answer_len);

// Row 0 of H_L (the CLS position).
Tensor pooled_repr(const Tensor& encoded);

// Binary checkpoint:
//   8 bytes magic "CMRCCKPT", u32 version (=1),
//   u64 config length + config JSON bytes,
//   u64 tensor count, then per tensor: u32 name length, name bytes,
//   u32 rank, u64 dims[rank], f64 values (little-endian IEEE-754).
void save_checkpoint(const std::filesystem::path& path, const BackboneModel& model);
BackboneModel load_checkpoint(const std::filesystem::path& path);

// Same container for arbitrary named arrays (Fisher states, anchors).
void save_named_tensors(const std::filesystem::path& path, const std::string& config_json,
                        const std::vector<NamedTensor>& tensors);
std::pair<std::string, std::vector<NamedTensor>> load_named_tensors(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace cmrc
