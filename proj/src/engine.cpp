#include "cmrc/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "cmrc/distill.hpp"
#include "cmrc/log.hpp"
#include "cmrc/optim.hpp"

namespace cmrc {

// ---------------------------------------------------------------------------
// Enum names

std::string to_string(Method m) {
  switch (m) {
    case Method::ma_mrc: return "ma_mrc";
    case Method::lower: return "lower";
    case Method::upper: return "upper";
    case Method::ewc: return "ewc";
    case Method::online_ewc: return "online_ewc";
    case Method::agem: return "agem";
    case Method::der: return "der";
    case Method::derpp: return "derpp";
  }
  return "?";
}

std::string to_string(NormStrategy s) { return s == NormStrategy::norm1 ? "norm1" : "norm2"; }

std::string to_string(UncertaintyKind k) {
  switch (k) {
    case UncertaintyKind::entropy: return "entropy";
    case UncertaintyKind::prob: return "prob";
    case UncertaintyKind::random: return "random";
  }
  return "?";
}

std::string to_string(MmdKernel k) { return k == MmdKernel::linear ? "linear" : "rbf"; }

Method parse_method(const std::string& s) {
  for (Method m : {Method::ma_mrc, Method::lower, Method::upper, Method::ewc, Method::online_ewc, Method::agem,
                   Method::der, Method::derpp})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method '" + s +
                              "' (expected ma_mrc, lower, upper, ewc, online_ewc, agem, der, derpp)");
}

NormStrategy parse_norm(const std::string& s) {
  if (s == "norm1") return NormStrategy::norm1;
  if (s == "norm2") return NormStrategy::norm2;
  throw std::invalid_argument("unknown norm strategy '" + s + "' (expected norm1, norm2)");
}

UncertaintyKind parse_uncertainty(const std::string& s) {
  if (s == "entropy") return UncertaintyKind::entropy;
  if (s == "prob") return UncertaintyKind::prob;
  if (s == "random") return UncertaintyKind::random;
  throw std::invalid_argument("unknown uncertainty kind '" + s + "' (expected entropy, prob, random)");
}

MmdKernel parse_kernel(const std::string& s) {
  if (s == "linear") return MmdKernel::linear;
  if (s == "rbf") return MmdKernel::rbf;
  throw std::invalid_argument("unknown kernel '" + s + "' (expected linear, rbf)");
}

// ---------------------------------------------------------------------------
// Config

void ContinualConfig::validate(std::size_t domains) const {
  if (domains == 0) throw std::invalid_argument("config: the stream has no domains");
  if (!order.empty()) {
    if (order.size() != domains) {
      throw std::invalid_argument("config: order lists " + std::to_string(order.size()) + " domains, stream has " +
                                  std::to_string(domains));
    }
    std::vector<bool> seen(domains, false);
    for (std::size_t d : order) {
      if (d >= domains || seen[d]) throw std::invalid_argument("config: order is not a permutation of 0.." +
                                                               std::to_string(domains - 1));
      seen[d] = true;
    }
  }
  if (epochs == 0) throw std::invalid_argument("config: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
  if (!(memory_fraction >= 0.0 && memory_fraction < 1.0)) {
    throw std::invalid_argument("config: memory_fraction must lie in [0, 1)");
  }
  if (max_answer_len == 0) throw std::invalid_argument("config: max_answer_len must be positive");
  if (!(kl_temperature > 0.0)) throw std::invalid_argument("config: kl_temperature must be positive");
  if (!(rbf_bandwidth > 0.0)) throw std::invalid_argument("config: rbf_bandwidth must be positive");
  model.validate();
}

nlohmann::ordered_json config_to_json(const ContinualConfig& c) {
  nlohmann::ordered_json j;
  j["method"] = to_string(c.method);
  j["memory_capacity"] = c.memory_capacity;
  j["norm"] = to_string(c.norm);
  j["uncertainty"] = to_string(c.uncertainty);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["order"] = c.order;
  j["seed"] = c.seed;
  j["weights"] = {{"adv", c.weights.adv},
                  {"kl", c.weights.kl},
                  {"ewc_lambda", c.weights.ewc_lambda},
                  {"online_gamma", c.weights.online_gamma},
                  {"der_alpha", c.weights.der_alpha},
                  {"derpp_beta", c.weights.derpp_beta}};
  j["max_answer_len"] = c.max_answer_len;
  j["memory_fraction"] = c.memory_fraction;
  j["fisher_samples"] = c.fisher_samples;
  j["kl_temperature"] = c.kl_temperature;
  j["mmd_kernel"] = to_string(c.mmd_kernel);
  j["rbf_bandwidth"] = c.rbf_bandwidth;
  j["model"] = {{"vocab_size", c.model.vocab_size}, {"hidden", c.model.hidden},   {"layers", c.model.layers},
                {"heads", c.model.heads},           {"max_len", c.model.max_len}, {"ffn_mult", c.model.ffn_mult},
                {"init_std", c.model.init_std}};
  return j;
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
      throw std::invalid_argument("config: unknown key '" + it.key() + "'" + where);
    }
  }
}

}  // namespace

ContinualConfig config_from_json(const nlohmann::json& j, ContinualConfig c) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  reject_unknown(j,
                 {"method", "memory_capacity", "norm", "uncertainty", "epochs", "batch_size", "lr", "order", "seed",
                  "weights", "max_answer_len", "memory_fraction", "fisher_samples", "kl_temperature", "mmd_kernel",
                  "rbf_bandwidth", "model"},
                 "");
  try {
    if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
    if (j.contains("norm")) c.norm = parse_norm(j["norm"].get<std::string>());
    if (j.contains("uncertainty")) c.uncertainty = parse_uncertainty(j["uncertainty"].get<std::string>());
    if (j.contains("mmd_kernel")) c.mmd_kernel = parse_kernel(j["mmd_kernel"].get<std::string>());
    read_field(j, "memory_capacity", c.memory_capacity);
    read_field(j, "epochs", c.epochs);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "lr", c.lr);
    read_field(j, "order", c.order);
    read_field(j, "seed", c.seed);
    read_field(j, "max_answer_len", c.max_answer_len);
    read_field(j, "memory_fraction", c.memory_fraction);
    read_field(j, "fisher_samples", c.fisher_samples);
    read_field(j, "kl_temperature", c.kl_temperature);
    read_field(j, "rbf_bandwidth", c.rbf_bandwidth);
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      reject_unknown(w, {"adv", "kl", "ewc_lambda", "online_gamma", "der_alpha", "derpp_beta"}, " in weights");
      read_field(w, "adv", c.weights.adv);
      read_field(w, "kl", c.weights.kl);
      read_field(w, "ewc_lambda", c.weights.ewc_lambda);
      read_field(w, "online_gamma", c.weights.online_gamma);
      read_field(w, "der_alpha", c.weights.der_alpha);
      read_field(w, "derpp_beta", c.weights.derpp_beta);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      reject_unknown(m, {"vocab_size", "hidden", "layers", "heads", "max_len", "ffn_mult", "init_std"}, " in model");
      read_field(m, "vocab_size", c.model.vocab_size);
      read_field(m, "hidden", c.model.hidden);
      read_field(m, "layers", c.model.layers);
      read_field(m, "heads", c.model.heads);
      read_field(m, "max_len", c.model.max_len);
      read_field(m, "ffn_mult", c.model.ffn_mult);
      read_field(m, "init_std", c.model.init_std);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return c;
}

std::uint64_t config_hash(const ContinualConfig& config) { return fnv1a64(config_to_json(config).dump()); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Regularizers

FisherState estimate_fisher(const BackboneModel& model, std::span<const Sample> samples, std::size_t max_samples,
                            Rng& rng) {
  BackboneModel work = model.clone(true);
  std::vector<Tensor> params = work.parameters();
  FisherState state;
  for (const Tensor& p : model.parameters()) {
    state.fisher.push_back(Tensor::zeros(p.shape()));
    state.anchor.push_back(p.clone(false));
  }
  const std::size_t n = std::min(max_samples, samples.size());
  if (n == 0) return state;
  for (std::size_t idx : rng.sample_without_replacement(samples.size(), n)) {
    const Sample& s = samples[idx];
    work.zero_grad();
    backward(span_loss(work.forward(s.input_ids), s.answer_start, s.answer_end));
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!params[k].has_grad()) continue;
      auto g = params[k].grad();
      auto f = state.fisher[k].mutable_data();
      for (std::size_t i = 0; i < f.size(); ++i) f[i] += g[i] * g[i];
    }
  }
  for (Tensor& f : state.fisher)
    for (double& v : f.mutable_data()) v /= static_cast<double>(n);
  return state;
}

Tensor ewc_penalty(const std::vector<Tensor>& params, std::span<const FisherState> states, double lambda) {
  using namespace ops;
  std::vector<Tensor> terms;
  for (const FisherState& st : states) {
    if (st.fisher.size() != params.size() || st.anchor.size() != params.size()) {
      throw std::invalid_argument("ewc_penalty: Fisher state does not match the parameter list");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      terms.push_back(sum(mul(st.fisher[k], squared_difference(params[k], st.anchor[k]))));
    }
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return scale(add_n(terms), lambda / 2.0);
}

FisherState merge_online(const std::optional<FisherState>& old, const FisherState& fresh, double gamma) {
  FisherState out;
  for (std::size_t k = 0; k < fresh.fisher.size(); ++k) {
    Tensor f = fresh.fisher[k].clone(false);
    if (old) {
      auto dst = f.mutable_data();
      auto prev = old->fisher[k].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gamma * prev[i] + dst[i];
    }
    out.fisher.push_back(std::move(f));
    out.anchor.push_back(fresh.anchor[k].clone(false));
  }
  return out;
}

std::vector<double> agem_project(std::span<const double> g, std::span<const double> g_ref) {
  if (g.size() != g_ref.size()) throw std::invalid_argument("agem_project: gradient lengths differ");
  double dot = 0.0;
  double ref_sq = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    dot += g[i] * g_ref[i];
    ref_sq += g_ref[i] * g_ref[i];
  }
  std::vector<double> out(g.begin(), g.end());
  if (dot >= 0.0 || ref_sq == 0.0) return out;
  const double c = dot / ref_sq;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * g_ref[i];
  return out;
}

Tensor logit_mse(const CachedLogits& cached, const SpanDistribution& current) {
  using namespace ops;
  if (cached.start.size() != current.length() || cached.end.size() != current.length()) {
    throw std::invalid_argument("logit_mse: cached logits have length " + std::to_string(cached.start.size()) +
                                ", current " + std::to_string(current.length()));
  }
  return add(mean(squared_difference(current.start_logits, Tensor::vector(cached.start))),
             mean(squared_difference(current.end_logits, Tensor::vector(cached.end))));
}

namespace {

Tensor der_terms(const BackboneModel& model, std::span<const MemoryItem* const> batch, double alpha, double beta,
                 bool with_labels) {
  using namespace ops;
  std::vector<Tensor> mse;
  std::vector<Tensor> labels;
  for (const MemoryItem* item : batch) {
    const SpanDistribution dist = model.forward(item->sample.input_ids);
    if (item->teacher_logits) {
      mse.push_back(logit_mse(*item->teacher_logits, dist));
    } else {
      warn("der: memory item " + item->sample.id + " has no cached logits; skipped");
    }
    if (with_labels) labels.push_back(span_loss(dist, item->sample.answer_start, item->sample.answer_end));
  }
  std::vector<Tensor> parts;
  if (!mse.empty()) parts.push_back(scale(add_n(mse), alpha / static_cast<double>(mse.size())));
  if (with_labels && !labels.empty()) parts.push_back(scale(add_n(labels), beta / static_cast<double>(labels.size())));
  if (parts.empty()) return Tensor::scalar(0.0);
  return parts.size() == 1 ? parts[0] : add(parts[0], parts[1]);
}

}  // namespace

Tensor der_loss(const BackboneModel& model, std::span<const MemoryItem* const> batch, double alpha) {
  return der_terms(model, batch, alpha, 0.0, false);
}

Tensor derpp_loss(const BackboneModel& model, std::span<const MemoryItem* const> batch, double alpha, double beta) {
  return der_terms(model, batch, alpha, beta, true);
}

// ---------------------------------------------------------------------------
// Evaluation

double evaluate_domain_f1(const BackboneModel& model, std::span<const Sample> test, std::size_t max_answer_len,
                          double* em) {
  NoGradGuard no_grad;
  double f1_total = 0.0;
  double em_total = 0.0;
  for (const Sample& s : test) {
    const SpanDistribution dist = model.forward(s.input_ids);
    const auto [i, j] = decode_answer(dist.p_start, dist.p_end, max_answer_len);
    const std::span<const int> pred(s.input_ids.data() + i, static_cast<std::size_t>(j - i + 1));
    const EmF1 score = em_f1(pred, s.answer_ids);
    f1_total += score.f1;
    em_total += score.em;
  }
  const double n = test.empty() ? 1.0 : static_cast<double>(test.size());
  if (em) *em = em_total / n;
  return f1_total / n;
}

DomainScore evaluate_domain(const BackboneModel& model, const DomainSamples& domain, std::size_t index,
                            std::size_t max_answer_len) {
  DomainScore score;
  score.name = domain.name;
  score.domain = index;
  score.count = domain.test.size();
  double em = 0.0;
  score.f1 = 100.0 * evaluate_domain_f1(model, domain.test, max_answer_len, &em);
  score.em = 100.0 * em;
  return score;
}

std::vector<DomainSamples> prepare_stream(const DomainStream& stream, ContinualConfig& config) {
  config.model.vocab_size = stream.vocab.size();
  AssemblyStats stats;
  auto data = assemble_stream(stream, config.model.max_len, &stats);
  if (stats.truncated_away > 0) {
    warn(std::to_string(stats.truncated_away) + " samples dropped: answer lost to truncation at max_len " +
         std::to_string(config.model.max_len));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Engine

namespace {

bool uses_memory(Method m) {
  return m == Method::ma_mrc || m == Method::agem || m == Method::der || m == Method::derpp;
}

struct StatePaths {
  std::filesystem::path dir;
  std::filesystem::path state() const { return dir / "state.json"; }
  std::filesystem::path model() const { return dir / "model.ckpt"; }
  std::filesystem::path memory() const { return dir / "memory.jsonl"; }
  std::filesystem::path fisher() const { return dir / "fisher.bin"; }
  std::filesystem::path report() const { return dir / "report.json"; }
};

class Engine {
 public:
  Engine(const std::vector<DomainSamples>& data, const ContinualConfig& config, const RunHooks& hooks)
      : data_(data), config_(config), hooks_(hooks), base_rng_(config.seed), initial_(make_initial()),
        model_(initial_.clone(true)) {
    order_ = config.order;
    if (order_.empty())
      for (std::size_t d = 0; d < data.size(); ++d) order_.push_back(d);
    memory_.capacity = config.memory_capacity;
    report_.metadata = metadata();
  }

  RunResult run(const RunOptions& options) {
    std::size_t first = 0;
    std::optional<StatePaths> paths;
    if (options.state_dir) {
      paths = StatePaths{*options.state_dir};
      std::filesystem::create_directories(paths->dir);
      first = try_resume(*paths);
    }
    for (std::size_t t = first; t < order_.size(); ++t) {
      if (options.stop_after_steps && t >= *options.stop_after_steps) break;
      const auto start = std::chrono::steady_clock::now();
      run_step(t);
      step_seconds_.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
      if (paths) save_state(*paths, t + 1);
    }
    return RunResult{std::move(model_), std::move(memory_), std::move(report_), std::move(step_seconds_)};
  }

 private:
  BackboneModel make_initial() {
    Rng rng = base_rng_.fork("model");
    return BackboneModel(config_.model, rng);
  }

  nlohmann::ordered_json metadata() const {
    nlohmann::ordered_json m;
    m["method"] = to_string(config_.method);
    m["seed"] = config_.seed;
    m["order"] = order_;
    std::vector<std::string> names;
    for (std::size_t d : order_) names.push_back(data_[d].name);
    m["domains"] = names;
    m["config_hash"] = hex64(config_hash(config_));
    m["parameter_count"] = initial_.parameter_count();
    m["config"] = config_to_json(config_);
    return m;
  }

  Rng step_rng(std::size_t t, std::string_view purpose) const { return base_rng_.fork("step").fork(t).fork(purpose); }

  MemoryOptions memory_options() const {
    MemoryOptions o;
    o.norm = config_.norm;
    o.kind = config_.method == Method::ma_mrc ? config_.uncertainty : UncertaintyKind::random;
    return o;
  }

  void touch(std::size_t t, const Sample& s) const {
    if (hooks_.on_train_sample) hooks_.on_train_sample(t, s);
  }

  void notify_update(std::size_t t, double loss, const TeacherSnapshot* teacher) const {
    if (hooks_.on_update) hooks_.on_update(UpdateContext{t, &model_, teacher, loss});
  }

  std::size_t memory_batch_size() const {
    if (memory_.empty()) return 0;
    const auto m = static_cast<std::size_t>(std::ceil(static_cast<double>(config_.batch_size) * config_.memory_fraction));
    return std::min({m, memory_.size(), config_.batch_size - 1});
  }

  std::vector<const MemoryItem*> draw_memory(std::size_t k, Rng& rng) const {
    std::vector<const MemoryItem*> out;
    for (std::size_t idx : rng.sample_without_replacement(memory_.size(), k)) out.push_back(&memory_.items[idx]);
    return out;
  }

  // Shuffled batches of `samples`, `per_batch` at a time, over all epochs.
  template <typename Fn>
  void for_each_batch(std::span<const Sample* const> samples, std::size_t per_batch, Rng& shuffle_rng, Fn&& fn) {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      shuffle_rng.shuffle(std::span<std::size_t>(idx));
      for (std::size_t b = 0; b < idx.size(); b += per_batch) {
        std::vector<const Sample*> batch;
        for (std::size_t i = b; i < std::min(idx.size(), b + per_batch); ++i) batch.push_back(samples[idx[i]]);
        fn(batch);
      }
    }
  }

  Tensor mean_span_loss(std::size_t t, const std::vector<const Sample*>& batch) {
    std::vector<Tensor> losses;
    for (const Sample* s : batch) {
      touch(t, *s);
      losses.push_back(span_loss(model_.forward(s->input_ids), s->answer_start, s->answer_end));
    }
    return ops::scale(ops::add_n(losses), 1.0 / static_cast<double>(losses.size()));
  }

  std::vector<const Sample*> train_view(std::size_t domain) const {
    std::vector<const Sample*> out;
    for (const Sample& s : data_[domain].train) out.push_back(&s);
    return out;
  }

  // Plain span loss on `samples`, optionally with an extra regularizer.
  void supervised_step(std::size_t t, std::span<const Sample* const> samples,
                       const std::function<Tensor()>& regularizer = {}) {
    Adam opt(model_.parameters(), AdamOptions{config_.lr});
    Rng shuffle = step_rng(t, "shuffle");
    for_each_batch(samples, config_.batch_size, shuffle, [&](const std::vector<const Sample*>& batch) {
      Tensor loss = mean_span_loss(t, batch);
      if (regularizer) loss = ops::add(loss, regularizer());
      opt.zero_grad();
      backward(loss);
      opt.step();
      notify_update(t, loss.item(), nullptr);
    });
    trained_samples_ = samples.size();
  }

  void adversarial_step(std::size_t t, std::size_t domain) {
    const std::vector<const Sample*> current = train_view(domain);
    const std::size_t m = memory_batch_size();
    if (m == 0) {
      warn("step " + std::to_string(t) + ": memory is empty, training on the current domain only");
      supervised_step(t, current);
      return;
    }
    const TeacherSnapshot teacher(model_);
    Rng disc_rng = step_rng(t, "discriminator");
    discriminator_.emplace(config_.model.hidden, disc_rng);
    Adam disc_opt(discriminator_->parameters(), AdamOptions{config_.lr});
    Adam opt(model_.parameters(), AdamOptions{config_.lr});
    AdversarialOptions adv_opts;
    adv_opts.kernel = config_.mmd_kernel;
    adv_opts.rbf_bandwidth = config_.rbf_bandwidth;
    Rng shuffle = step_rng(t, "shuffle");
    Rng memory_rng = step_rng(t, "memory-batch");
    const std::size_t n_current = config_.batch_size - m;

    for_each_batch(current, n_current, shuffle, [&](const std::vector<const Sample*>& batch) {
      using namespace ops;
      const std::vector<const MemoryItem*> replay = draw_memory(m, memory_rng);
      std::vector<Tensor> span_terms;
      std::vector<Tensor> cur_reprs;
      std::vector<Tensor> mem_reprs;
      std::vector<Tensor> kl_terms;
      for (const Sample* s : batch) {
        touch(t, *s);
        const Tensor enc = model_.encode(s->input_ids);
        span_terms.push_back(span_loss(model_.predict_spans(enc), s->answer_start, s->answer_end));
        cur_reprs.push_back(pooled_repr(enc));
      }
      for (const MemoryItem* item : replay) {
        const Sample& s = item->sample;
        touch(t, s);
        const Tensor enc = model_.encode(s.input_ids);
        const SpanDistribution dist = model_.predict_spans(enc);
        span_terms.push_back(span_loss(dist, s.answer_start, s.answer_end));
        mem_reprs.push_back(pooled_repr(enc));
        if (config_.weights.kl != 0.0) {
          kl_terms.push_back(kl_distill_loss(teacher.forward(s.input_ids), dist, config_.kl_temperature));
        }
      }
      std::vector<Tensor> objective{scale(add_n(span_terms), 1.0 / static_cast<double>(span_terms.size()))};
      if (config_.weights.adv != 0.0) {
        const MinimaxStep game = minimax_step(*discriminator_, disc_opt, stack_rows(mem_reprs), stack_rows(cur_reprs),
                                              adv_opts);
        objective.push_back(scale(game.encoder_loss, config_.weights.adv));
      }
      if (!kl_terms.empty()) {
        objective.push_back(scale(add_n(kl_terms), config_.weights.kl / static_cast<double>(kl_terms.size())));
      }
      const Tensor loss = objective.size() == 1 ? objective[0] : add_n(objective);
      opt.zero_grad();
      backward(loss);
      opt.step();
      notify_update(t, loss.item(), &teacher);
    });
    trained_samples_ = current.size();
  }

  void agem_step(std::size_t t, std::size_t domain) {
    const std::vector<const Sample*> current = train_view(domain);
    const std::size_t m = memory_batch_size();
    if (m == 0) {
      supervised_step(t, current);
      return;
    }
    std::vector<Tensor> params = model_.parameters();
    Adam opt(params, AdamOptions{config_.lr});
    Rng shuffle = step_rng(t, "shuffle");
    Rng memory_rng = step_rng(t, "memory-batch");
    for_each_batch(current, config_.batch_size, shuffle, [&](const std::vector<const Sample*>& batch) {
      const Tensor loss = mean_span_loss(t, batch);
      opt.zero_grad();
      backward(loss);
      const std::vector<double> g = flatten_grads(params);
      std::vector<const Sample*> ref;
      for (const MemoryItem* item : draw_memory(m, memory_rng)) ref.push_back(&item->sample);
      opt.zero_grad();
      backward(mean_span_loss(t, ref));
      const std::vector<double> g_ref = flatten_grads(params);
      assign_grads(params, agem_project(g, g_ref));
      opt.step();
      notify_update(t, loss.item(), nullptr);
    });
    trained_samples_ = current.size();
  }

  void der_step(std::size_t t, std::size_t domain) {
    const std::vector<const Sample*> current = train_view(domain);
    const std::size_t m = memory_batch_size();
    if (m == 0) {
      supervised_step(t, current);
      return;
    }
    Adam opt(model_.parameters(), AdamOptions{config_.lr});
    Rng shuffle = step_rng(t, "shuffle");
    Rng memory_rng = step_rng(t, "memory-batch");
    const bool plus = config_.method == Method::derpp;
    for_each_batch(current, config_.batch_size, shuffle, [&](const std::vector<const Sample*>& batch) {
      const std::vector<const MemoryItem*> replay = draw_memory(m, memory_rng);
      for (const MemoryItem* item : replay) touch(t, item->sample);
      const Tensor replay_loss = plus ? derpp_loss(model_, replay, config_.weights.der_alpha, config_.weights.derpp_beta)
                                      : der_loss(model_, replay, config_.weights.der_alpha);
      const Tensor loss = ops::add(mean_span_loss(t, batch), replay_loss);
      opt.zero_grad();
      backward(loss);
      opt.step();
      notify_update(t, loss.item(), nullptr);
    });
    trained_samples_ = current.size();
  }

  void run_step(std::size_t t) {
    const std::size_t domain = order_[t];
    discriminator_.reset();
    const Method method = config_.method;
    if (method == Method::upper) {
      model_.copy_values_from(initial_);
      std::vector<const Sample*> pool;
      for (std::size_t s = 0; s <= t; ++s)
        for (const Sample& sample : data_[order_[s]].train) pool.push_back(&sample);
      supervised_step(t, pool);
    } else if (t == 0 || method == Method::lower) {
      supervised_step(t, train_view(domain));
    } else if (method == Method::ma_mrc) {
      adversarial_step(t, domain);
    } else if (method == Method::ewc || method == Method::online_ewc) {
      const std::vector<Tensor> params = model_.parameters();
      supervised_step(t, train_view(domain), [&] { return ewc_penalty(params, fisher_, config_.weights.ewc_lambda); });
    } else if (method == Method::agem) {
      agem_step(t, domain);
    } else {
      der_step(t, domain);
    }

    if (method == Method::ewc || method == Method::online_ewc) {
      Rng fisher_rng = step_rng(t, "fisher");
      FisherState fresh = estimate_fisher(model_, data_[domain].train, config_.fisher_samples, fisher_rng);
      if (method == Method::ewc) {
        fisher_.push_back(std::move(fresh));
      } else {
        std::optional<FisherState> old;
        if (!fisher_.empty()) old = fisher_.front();
        fisher_.assign(1, merge_online(old, fresh, config_.weights.online_gamma));
      }
    }

    if (uses_memory(method)) {
      Rng memory_rng = step_rng(t, "memory-update");
      if (t == 0) {
        memory_ = init_memory(data_[domain].train, config_.memory_capacity, memory_rng, &model_, memory_options());
      } else {
        memory_ = update_memory(memory_, data_[domain].train, model_, t, memory_rng, memory_options());
      }
    }

    std::vector<DomainScore> scores;
    for (std::size_t s = 0; s <= t; ++s) {
      scores.push_back(evaluate_domain(model_, data_[order_[s]], order_[s], config_.max_answer_len));
    }
    report_.steps.push_back(make_step_report(t, domain, data_[domain].name, std::move(scores)));

    if (hooks_.on_step_end) {
      StepContext ctx;
      ctx.step = t;
      ctx.domain = domain;
      ctx.model = &model_;
      ctx.memory = &memory_;
      ctx.discriminator = discriminator_ ? &*discriminator_ : nullptr;
      ctx.report = &report_.steps.back();
      ctx.trained_samples = trained_samples_;
      hooks_.on_step_end(ctx);
    }
  }

  // -------------------------------------------------------------------------
  // Checkpointing

  void save_state(const StatePaths& p, std::size_t completed) const {
    save_checkpoint(p.model(), model_);
    save_memory_jsonl(p.memory(), memory_);
    std::vector<NamedTensor> fisher;
    for (std::size_t k = 0; k < fisher_.size(); ++k) {
      for (std::size_t i = 0; i < fisher_[k].fisher.size(); ++i) {
        fisher.push_back({"fisher." + std::to_string(k) + "." + std::to_string(i), fisher_[k].fisher[i]});
        fisher.push_back({"anchor." + std::to_string(k) + "." + std::to_string(i), fisher_[k].anchor[i]});
      }
    }
    save_named_tensors(p.fisher(), "{\"states\":" + std::to_string(fisher_.size()) + "}", fisher);
    write_report(p.report(), report_);
    nlohmann::ordered_json state;
    state["config_hash"] = hex64(config_hash(config_));
    state["completed_steps"] = completed;
    const auto tmp = std::filesystem::path(p.state().string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      out << state.dump(2) << '\n';
    }
    std::filesystem::rename(tmp, p.state());
  }

  std::size_t try_resume(const StatePaths& p) {
    if (!std::filesystem::exists(p.state())) return 0;
    std::ifstream in(p.state(), std::ios::binary);
    const auto state = nlohmann::json::parse(in);
    if (state.at("config_hash").get<std::string>() != hex64(config_hash(config_))) {
      warn("state directory " + p.dir.string() + " belongs to a different config; starting over");
      return 0;
    }
    const auto completed = state.at("completed_steps").get<std::size_t>();
    model_.copy_values_from(load_checkpoint(p.model()));
    memory_ = load_memory_jsonl(p.memory(), config_.memory_capacity);
    auto [header, tensors] = load_named_tensors(p.fisher());
    const auto states = nlohmann::json::parse(header).at("states").get<std::size_t>();
    const std::size_t per_state = model_.named_parameters().size();
    fisher_.assign(states, FisherState{});
    for (std::size_t k = 0; k < states; ++k) {
      for (std::size_t i = 0; i < per_state; ++i) {
        fisher_[k].fisher.push_back(tensors[2 * (k * per_state + i)].tensor);
        fisher_[k].anchor.push_back(tensors[2 * (k * per_state + i) + 1].tensor);
      }
    }
    report_ = read_report(p.report());
    if (report_.steps.size() != completed) throw std::runtime_error("state directory: report and state disagree");
    return completed;
  }

  const std::vector<DomainSamples>& data_;
  ContinualConfig config_;
  const RunHooks& hooks_;
  Rng base_rng_;
  BackboneModel initial_;
  BackboneModel model_;
  std::vector<std::size_t> order_;
  Memory memory_;
  std::vector<FisherState> fisher_;
  std::optional<Discriminator> discriminator_;
  EvalReport report_;
  std::vector<double> step_seconds_;
  std::size_t trained_samples_ = 0;
};

}  // namespace

RunResult run_stream(const std::vector<DomainSamples>& data, const ContinualConfig& config, const RunHooks& hooks,
                     const RunOptions& options) {
  config.validate(data.size());
  for (const auto& d : data) {
    if (d.train.empty()) throw std::invalid_argument("run_stream: domain " + d.name + " has no training samples");
    if (d.test.empty()) throw std::invalid_argument("run_stream: domain " + d.name + " has no test samples");
  }
  Engine engine(data, config, hooks);
  return engine.run(options);
}

}  // namespace cmrc
