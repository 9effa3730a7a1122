#include "cmrc/backbone.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cmrc {

namespace {

constexpr char kMagic[8] = {'C', 'M', 'R', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string block_name(std::size_t i, const char* leaf) { return "block" + std::to_string(i) + "." + leaf; }

}  // namespace

ModelConfig ModelConfig::full_scale(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.hidden = 768;
  c.layers = 12;
  c.heads = 12;
  c.max_len = 384;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size < 3) throw std::invalid_argument("model: vocabulary must hold the special tokens");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) {
    throw std::invalid_argument("model: hidden " + std::to_string(hidden) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (max_len < 4) throw std::invalid_argument("model: max_len too small");
  if (ffn_mult == 0) throw std::invalid_argument("model: ffn_mult must be positive");
}

SpanDistribution SpanDistribution::from_logits(Tensor start_logits, Tensor end_logits) {
  SpanDistribution d;
  {
    NoGradGuard no_grad;
    d.p_start = ops::softmax(start_logits).to_vector();
    d.p_end = ops::softmax(end_logits).to_vector();
  }
  d.start_logits = std::move(start_logits);
  d.end_logits = std::move(end_logits);
  return d;
}

// ---------------------------------------------------------------------------
// BackboneModel

void BackboneModel::add_param(std::string name, Shape shape, Rng* rng, double fill) {
  Tensor t = Tensor::full(std::move(shape), fill, true);
  if (rng) {
    for (double& v : t.mutable_data()) v = rng->truncated_normal(config_.init_std);
  }
  params_.push_back({std::move(name), std::move(t)});
}

BackboneModel::BackboneModel(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t h = config_.hidden, f = config_.hidden * config_.ffn_mult;
  add_param("tok_emb", {config_.vocab_size, h}, &rng, 0.0);
  add_param("pos_emb", {config_.max_len, h}, &rng, 0.0);
  for (std::size_t i = 0; i < config_.layers; ++i) {
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      add_param(block_name(i, w), {h, h}, &rng, 0.0);
      add_param(block_name(i, w) + ".bias", {h}, nullptr, 0.0);
    }
    add_param(block_name(i, "ln1.gamma"), {h}, nullptr, 1.0);
    add_param(block_name(i, "ln1.beta"), {h}, nullptr, 0.0);
    add_param(block_name(i, "ffn.w1"), {h, f}, &rng, 0.0);
    add_param(block_name(i, "ffn.b1"), {f}, nullptr, 0.0);
    add_param(block_name(i, "ffn.w2"), {f, h}, &rng, 0.0);
    add_param(block_name(i, "ffn.b2"), {h}, nullptr, 0.0);
    add_param(block_name(i, "ln2.gamma"), {h}, nullptr, 1.0);
    add_param(block_name(i, "ln2.beta"), {h}, nullptr, 0.0);
  }
  add_param("head.start", {h}, &rng, 0.0);
  add_param("head.end", {h}, &rng, 0.0);
}

Tensor& BackboneModel::parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("model: no parameter " + name);
}

const Tensor& BackboneModel::parameter(const std::string& name) const {
  return const_cast<BackboneModel*>(this)->parameter(name);
}

std::vector<Tensor> BackboneModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> BackboneModel::encoder_parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : params_)
    if (p.name.rfind("head.", 0) != 0) out.push_back(p.tensor);
  return out;
}

std::size_t BackboneModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

BackboneModel BackboneModel::clone(bool requires_grad) const {
  BackboneModel out;
  out.config_ = config_;
  for (const auto& p : params_) out.params_.push_back({p.name, p.tensor.clone(requires_grad)});
  return out;
}

void BackboneModel::copy_values_from(const BackboneModel& other) {
  if (other.params_.size() != params_.size()) throw std::invalid_argument("model: parameter layouts differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = other.params_[i].tensor.data();
    auto dst = params_[i].tensor.mutable_data();
    if (src.size() != dst.size()) throw std::invalid_argument("model: parameter " + params_[i].name + " size differs");
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void BackboneModel::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Tensor BackboneModel::encode(std::span<const int> input_ids) const {
  if (input_ids.empty() || input_ids.size() > config_.max_len) {
    throw std::invalid_argument("encode: sequence length " + std::to_string(input_ids.size()) + " outside [1, " +
                                std::to_string(config_.max_len) + "]");
  }
  using namespace ops;
  const std::size_t l = input_ids.size();
  std::vector<int> positions(l);
  for (std::size_t i = 0; i < l; ++i) positions[i] = static_cast<int>(i);
  Tensor x = add(embedding(parameter("tok_emb"), input_ids), embedding(parameter("pos_emb"), positions));

  const std::size_t heads = config_.heads;
  const std::size_t dh = config_.hidden / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t b = 0; b < config_.layers; ++b) {
    auto P = [&](const char* leaf) -> const Tensor& { return parameter(block_name(b, leaf)); };
    const Tensor q = add(matmul(x, P("attn.wq")), P("attn.wq.bias"));
    const Tensor k = add(matmul(x, P("attn.wk")), P("attn.wk.bias"));
    const Tensor v = add(matmul(x, P("attn.wv")), P("attn.wv.bias"));
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const Tensor qh = heads == 1 ? q : slice_cols(q, hd * dh, dh);
      const Tensor kh = heads == 1 ? k : slice_cols(k, hd * dh, dh);
      const Tensor vh = heads == 1 ? v : slice_cols(v, hd * dh, dh);
      const Tensor att = softmax(scale(matmul_nt(qh, kh), att_scale));
      head_out.push_back(matmul(att, vh));
    }
    const Tensor mixed = heads == 1 ? head_out.front() : concat_cols(head_out);
    const Tensor attn = add(matmul(mixed, P("attn.wo")), P("attn.wo.bias"));
    x = layer_norm(add(x, attn), P("ln1.gamma"), P("ln1.beta"));
    const Tensor ff = add(matmul(gelu(add(matmul(x, P("ffn.w1")), P("ffn.b1"))), P("ffn.w2")), P("ffn.b2"));
    x = layer_norm(add(x, ff), P("ln2.gamma"), P("ln2.beta"));
  }
  return x;
}

SpanDistribution BackboneModel::predict_spans(const Tensor& encoded) const {
  if (encoded.dim() != 2 || encoded.cols() != config_.hidden) {
    throw std::invalid_argument("predict_spans: expected [l x " + std::to_string(config_.hidden) + "], got " +
                                shape_str(encoded.shape()));
  }
  return SpanDistribution::from_logits(ops::matvec(encoded, parameter("head.start")),
                                       ops::matvec(encoded, parameter("head.end")));
}

// ---------------------------------------------------------------------------
// Loss and decoding

Tensor span_loss(const SpanDistribution& dist, int y_start, int y_end) {
  const auto l = static_cast<int>(dist.length());
  if (y_start < 0 || y_start >= l || y_end < 0 || y_end >= l) {
    throw std::out_of_range("span_loss: gold span (" + std::to_string(y_start) + ", " + std::to_string(y_end) +
                            ") outside sequence of length " + std::to_string(l));
  }
  using namespace ops;
  const Tensor ls = pick(log_softmax(dist.start_logits), static_cast<std::size_t>(y_start));
  const Tensor le = pick(log_softmax(dist.end_logits), static_cast<std::size_t>(y_end));
  return neg(add(ls, le));
}

std::pair<int, int> decode_answer(std::span<const double> p_start, std::span<const double> p_end,
                                  std::size_t max_answer_len) {
  if (p_start.size() != p_end.size() || p_start.empty()) {
    throw std::invalid_argument("decode_answer: start/end distributions must be non-empty and equal length");
  }
  max_answer_len = std::max<std::size_t>(max_answer_len, 1);
  const std::size_t l = p_start.size();
  double best = -1.0;
  std::pair<int, int> arg{0, 0};
  for (std::size_t i = 0; i < l; ++i) {
    const std::size_t last = std::min(l, i + max_answer_len);
    for (std::size_t j = i; j < last; ++j) {
      const double score = p_start[i] * p_end[j];
      if (score > best) {
        best = score;
        arg = {static_cast<int>(i), static_cast<int>(j)};
      }
    }
  }
  return arg;
}

Tensor pooled_repr(const Tensor& encoded) { return ops::row(encoded, 0); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
  } else {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T get(std::istream& in, const std::string& where) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error(where + ": truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    value = std::bit_cast<T>(bytes);
  }
  return value;
}

}  // namespace

void save_named_tensors(const std::filesystem::path& path, const std::string& config_json,
                        const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, config_json.size());
  out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  put<std::uint64_t>(out, tensors.size());
  for (const auto& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.tensor.dim()));
    for (std::size_t d : t.tensor.shape()) put<std::uint64_t>(out, d);
    for (double v : t.tensor.data()) put<double>(out, v);
  }
  if (!out) throw std::runtime_error("error writing checkpoint " + path.string());
}

std::pair<std::string, std::vector<NamedTensor>> load_named_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  const std::string where = path.string();
  if (!in) throw std::runtime_error("cannot read checkpoint " + where);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error(where + ": not a checkpoint");
  const auto version = get<std::uint32_t>(in, where);
  if (version != kVersion) throw std::runtime_error(where + ": unsupported checkpoint version " + std::to_string(version));
  std::string config(get<std::uint64_t>(in, where), '\0');
  in.read(config.data(), static_cast<std::streamsize>(config.size()));
  const auto count = get<std::uint64_t>(in, where);
  std::vector<NamedTensor> tensors;
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name(get<std::uint32_t>(in, where), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rank = get<std::uint32_t>(in, where);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(get<std::uint64_t>(in, where));
      n *= shape.back();
    }
    std::vector<double> values(n);
    for (double& v : values) v = get<double>(in, where);
    tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values), false)});
  }
  return {std::move(config), std::move(tensors)};
}

std::string model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden"] = c.hidden;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["max_len"] = c.max_len;
  j["ffn_mult"] = c.ffn_mult;
  j["init_std"] = c.init_std;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.ffn_mult = j.value("ffn_mult", std::size_t{4});
  c.init_std = j.value("init_std", 0.02);
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const BackboneModel& model) {
  save_named_tensors(path, model_config_json(model.config()), model.named_parameters());
}

BackboneModel load_checkpoint(const std::filesystem::path& path) {
  auto [config_text, tensors] = load_named_tensors(path);
  Rng rng(0);
  BackboneModel model(model_config_from_json(config_text), rng);
  if (tensors.size() != model.named_parameters().size()) {
    throw std::runtime_error(path.string() + ": parameter count does not match its config");
  }
  for (const auto& t : tensors) {
    Tensor& dst = model.parameter(t.name);
    if (dst.shape() != t.tensor.shape()) throw std::runtime_error(path.string() + ": shape mismatch for " + t.name);
    std::copy(t.tensor.data().begin(), t.tensor.data().end(), dst.mutable_data().begin());
  }
  return model;
}

}  // namespace cmrc
