#include "cmrc/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "cmrc/log.hpp"

namespace cmrc {

std::map<int, std::size_t> Memory::counts_by_step() const {
  std::map<int, std::size_t> counts;
  for (const auto& item : items) ++counts[item.origin_step];
  return counts;
}

double uncertainty(const BackboneModel& model, const Sample& sample, UncertaintyKind kind) {
  NoGradGuard no_grad;
  const SpanDistribution dist = model.forward(sample.input_ids);
  switch (kind) {
    case UncertaintyKind::entropy:
      return std::log(std::max(dist.p_start[static_cast<std::size_t>(sample.answer_start)], 1e-300)) +
             std::log(std::max(dist.p_end[static_cast<std::size_t>(sample.answer_end)], 1e-300));
    case UncertaintyKind::prob:
      return *std::max_element(dist.p_start.begin(), dist.p_start.end()) +
             *std::max_element(dist.p_end.begin(), dist.p_end.end());
    case UncertaintyKind::random:
      return 0.0;
  }
  return 0.0;
}

double compute_uncertainty(const BackboneModel& model, MemoryItem& item, UncertaintyKind kind) {
  const double u = uncertainty(model, item.sample, kind);
  item.last_uncertainty = u;
  item.best_uncertainty = std::max(item.best_uncertainty, u);
  return u;
}

std::vector<double> retention_weights(std::span<const MemoryItem* const> items, NormStrategy strategy,
                                      double pooled_mean_last, const MemoryOptions& options) {
  if (items.empty()) throw std::invalid_argument("retention_weights: no items");
  std::vector<double> diff(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    diff[i] = strategy == NormStrategy::norm1 ? items[i]->best_uncertainty - items[i]->last_uncertainty
                                              : pooled_mean_last - items[i]->last_uncertainty;
  }
  std::vector<double> w(items.size());
  if (options.softmax_weights) {
    const double mx = *std::max_element(diff.begin(), diff.end());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(diff[i] - mx);
  } else {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::max(diff[i], 0.0) + options.epsilon;
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= total;
  return w;
}

std::vector<std::size_t> memory_quotas(std::size_t capacity, std::size_t slots) {
  if (slots == 0) throw std::invalid_argument("memory_quotas: no slots");
  const std::size_t q = capacity / slots;
  const std::size_t r = capacity - q * slots;
  std::vector<std::size_t> out(slots, q);
  for (std::size_t i = 0; i < r; ++i) ++out[i];
  return out;
}

std::vector<std::size_t> weighted_sample_without_replacement(std::span<const double> weights, std::size_t k, Rng& rng) {
  if (k > weights.size()) throw std::invalid_argument("weighted_sample_without_replacement: k exceeds population");
  std::vector<double> w(weights.begin(), weights.end());
  for (double v : w)
    if (!(v >= 0.0)) throw std::invalid_argument("weighted_sample_without_replacement: negative weight");
  std::vector<std::size_t> picked;
  picked.reserve(k);
  for (std::size_t n = 0; n < k; ++n) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    std::size_t choice = w.size();
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        acc += w[i];
        if (target < acc) {
          choice = i;
          break;
        }
      }
      if (choice == w.size()) {  // rounding at the top end
        for (std::size_t i = w.size(); i-- > 0;)
          if (w[i] > 0.0) {
            choice = i;
            break;
          }
      }
    } else {
      // All remaining mass is zero: uniform over the unpicked.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < w.size(); ++i)
        if (std::find(picked.begin(), picked.end(), i) == picked.end()) rest.push_back(i);
      choice = rest[static_cast<std::size_t>(rng.below(rest.size()))];
    }
    picked.push_back(choice);
    w[choice] = 0.0;
  }
  return picked;
}

CachedLogits cache_logits(const BackboneModel& model, const Sample& sample) {
  NoGradGuard no_grad;
  const SpanDistribution dist = model.forward(sample.input_ids);
  return {dist.start_logits.to_vector(), dist.end_logits.to_vector()};
}

namespace {

MemoryItem make_item(const Sample& sample, int step, const BackboneModel* model, const MemoryOptions& options) {
  MemoryItem item;
  item.sample = sample;
  item.origin_step = step;
  if (model && options.kind != UncertaintyKind::random) {
    const double u = uncertainty(*model, sample, options.kind);
    item.best_uncertainty = item.last_uncertainty = u;
  }
  if (model && options.cache_logits) item.teacher_logits = cache_logits(*model, sample);
  return item;
}

}  // namespace

Memory init_memory(std::span<const Sample> first_domain, std::size_t capacity, Rng& rng, const BackboneModel* model,
                   const MemoryOptions& options) {
  Memory memory;
  memory.capacity = capacity;
  std::size_t take = capacity;
  if (first_domain.size() < capacity) {
    warn("init_memory: first domain holds " + std::to_string(first_domain.size()) + " samples, fewer than capacity " +
         std::to_string(capacity) + "; storing all");
    take = first_domain.size();
  }
  for (std::size_t idx : rng.sample_without_replacement(first_domain.size(), take)) {
    memory.items.push_back(make_item(first_domain[idx], 0, model, options));
  }
  return memory;
}

Memory update_memory(const Memory& memory, std::span<const Sample> current, const BackboneModel& model,
                     std::size_t step, Rng& rng, const MemoryOptions& options) {
  if (step < 1) throw std::invalid_argument("update_memory: step must be >= 1");
  Memory refreshed = memory;
  if (options.kind != UncertaintyKind::random) {
    for (auto& item : refreshed.items) compute_uncertainty(model, item, options.kind);
  }
  double pooled_mean = 0.0;
  if (!refreshed.items.empty()) {
    for (const auto& item : refreshed.items) pooled_mean += item.last_uncertainty;
    pooled_mean /= static_cast<double>(refreshed.items.size());
  }

  const std::vector<std::size_t> quotas = memory_quotas(memory.capacity, step + 1);
  Memory out;
  out.capacity = memory.capacity;
  std::size_t shortfall = 0;
  for (std::size_t s = 0; s < step; ++s) {
    std::vector<const MemoryItem*> group;
    for (const auto& item : refreshed.items)
      if (item.origin_step == static_cast<int>(s)) group.push_back(&item);
    if (quotas[s] == 0) continue;
    if (group.size() < quotas[s]) {
      shortfall += quotas[s] - group.size();
      for (const MemoryItem* item : group) out.items.push_back(*item);
      continue;
    }
    std::vector<double> weights;
    if (options.kind == UncertaintyKind::random) {
      weights.assign(group.size(), 1.0 / static_cast<double>(group.size()));
    } else {
      weights = retention_weights(group, options.norm, pooled_mean, options);
    }
    for (std::size_t idx : weighted_sample_without_replacement(weights, quotas[s], rng)) {
      out.items.push_back(*group[idx]);
    }
  }

  std::size_t want = quotas[step] + shortfall;
  if (want > current.size()) {
    warn("update_memory: current domain holds only " + std::to_string(current.size()) + " samples");
    want = current.size();
  }
  for (std::size_t idx : rng.sample_without_replacement(current.size(), want)) {
    out.items.push_back(make_item(current[idx], static_cast<int>(step), &model, options));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_memory_jsonl(const std::filesystem::path& path, const Memory& memory) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write memory " + path.string());
  for (const auto& item : memory.items) {
    const Sample& s = item.sample;
    const int offset = static_cast<int>(s.question_ids.size()) + 2;
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["domain"] = s.domain;
    j["question_ids"] = s.question_ids;
    j["passage_ids"] = s.passage_ids;
    j["answer_start"] = s.answer_start - offset;
    j["answer_end"] = s.answer_end - offset;
    nlohmann::ordered_json m;
    m["origin_step"] = item.origin_step;
    m["best_uncertainty"] = item.best_uncertainty;
    m["last_uncertainty"] = item.last_uncertainty;
    if (item.teacher_logits) {
      m["teacher_logits"] = {{"start", item.teacher_logits->start}, {"end", item.teacher_logits->end}};
    }
    j["memory"] = std::move(m);
    out << j.dump() << '\n';
  }
}

Memory load_memory_jsonl(const std::filesystem::path& path, std::size_t capacity) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read memory " + path.string());
  Memory memory;
  memory.capacity = capacity;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Record r;
      r.id = j.at("id").get<std::string>();
      r.domain = j.at("domain").get<int>();
      r.question_ids = j.at("question_ids").get<std::vector<int>>();
      r.passage_ids = j.at("passage_ids").get<std::vector<int>>();
      r.answer_start = j.at("answer_start").get<int>();
      r.answer_end = j.at("answer_end").get<int>();
      auto sample = assemble_sample(r, r.question_ids.size() + r.passage_ids.size() + 3);
      MemoryItem item;
      item.sample = std::move(*sample);
      const auto& m = j.at("memory");
      item.origin_step = m.at("origin_step").get<int>();
      item.best_uncertainty = m.at("best_uncertainty").get<double>();
      item.last_uncertainty = m.at("last_uncertainty").get<double>();
      if (m.contains("teacher_logits")) {
        item.teacher_logits = CachedLogits{m["teacher_logits"].at("start").get<std::vector<double>>(),
                                           m["teacher_logits"].at("end").get<std::vector<double>>()};
      }
      memory.items.push_back(std::move(item));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed memory record: " + e.what());
    }
  }
  if (memory.items.size() > capacity) throw std::runtime_error(path.string() + ": more items than capacity");
  return memory;
}

}  // namespace cmrc
