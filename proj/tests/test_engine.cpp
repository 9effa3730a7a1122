#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "cmrc/engine.hpp"
#include "cmrc/gradcheck.hpp"
#include "cmrc/log.hpp"

using namespace cmrc;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  ContinualConfig config;
  std::vector<DomainSamples> data;
};

Fixture fixture(Method method, std::size_t domains = 3, std::size_t train = 24) {
  GeneratorConfig g;
  g.domains = domains;
  g.train_per_domain = train;
  g.test_per_domain = 12;
  g.vocab_size = 120;
  g.seed = 11;
  Fixture f;
  f.config.method = method;
  f.config.memory_capacity = 6;
  f.config.epochs = 1;
  f.config.batch_size = 4;
  f.config.seed = 5;
  f.config.fisher_samples = 8;
  f.config.model.hidden = 8;
  f.config.model.layers = 1;
  f.config.model.heads = 2;
  f.config.model.ffn_mult = 2;
  f.data = prepare_stream(generate_cdac_stream(g), f.config);
  return f;
}

std::vector<std::vector<double>> parameter_values(const BackboneModel& model) {
  std::vector<std::vector<double>> out;
  for (const Tensor& p : model.parameters()) out.push_back(p.to_vector());
  return out;
}

struct QuietWarnings {
  QuietWarnings() { set_warnings_silenced(true); }
  ~QuietWarnings() { set_warnings_silenced(false); }
};

MemoryItem item_for(std::vector<int> ids, int y_s, int y_e) {
  MemoryItem item;
  item.sample.input_ids = std::move(ids);
  item.sample.answer_start = y_s;
  item.sample.answer_end = y_e;
  return item;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.vocab_size = 16;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.max_len = 12;
  c.ffn_mult = 2;
  c.init_std = 0.3;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Regularizers

TEST_CASE("EWC penalty examples") {
  std::vector<Tensor> params{Tensor::vector({3.0, -1.0}, true)};
  FisherState s;
  s.fisher.push_back(Tensor::vector({1.0, 1.0}));
  s.anchor.push_back(Tensor::vector({3.0, -1.0}));
  CHECK(ewc_penalty(params, std::vector<FisherState>{s}, 2.0).item() == 0.0);
  s.anchor[0] = Tensor::vector({2.0, -2.0});
  CHECK(ewc_penalty(params, std::vector<FisherState>{s}, 2.0).item() == doctest::Approx(2.0));
  CHECK(ewc_penalty(params, std::vector<FisherState>{s, s}, 2.0).item() == doctest::Approx(4.0));
  CHECK(finite_difference_check([&] { return ewc_penalty(params, std::vector<FisherState>{s}, 3.0); }, params) < 1e-4);
}

TEST_CASE("online merge decays the old Fisher and keeps the newest anchor") {
  FisherState a, b;
  a.fisher.push_back(Tensor::vector({2.0, 4.0}));
  a.anchor.push_back(Tensor::vector({0.0, 0.0}));
  b.fisher.push_back(Tensor::vector({1.0, 1.0}));
  b.anchor.push_back(Tensor::vector({5.0, 6.0}));
  const FisherState m = merge_online(a, b, 0.5);
  CHECK(m.fisher[0].to_vector() == std::vector<double>{2.0, 3.0});
  CHECK(m.anchor[0].to_vector() == std::vector<double>{5.0, 6.0});
  CHECK(merge_online(std::nullopt, b, 0.5).fisher[0].to_vector() == b.fisher[0].to_vector());
}

TEST_CASE("Fisher estimates are non-negative and shaped like the model") {
  Fixture f = fixture(Method::ewc);
  Rng rng(1);
  const BackboneModel model(f.config.model, rng);
  const FisherState state = estimate_fisher(model, f.data[0].train, 8, rng);
  const auto params = model.parameters();
  REQUIRE(state.fisher.size() == params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    CHECK(state.fisher[k].shape() == params[k].shape());
    for (double v : state.fisher[k].data()) CHECK(v >= 0.0);
    CHECK(state.anchor[k].to_vector() == params[k].to_vector());
  }
}

TEST_CASE("A-GEM projection examples") {
  CHECK(agem_project(std::vector<double>{1, 0}, std::vector<double>{1, 1}) == std::vector<double>{1, 0});
  const auto p = agem_project(std::vector<double>{1, 0}, std::vector<double>{-1, 0});
  CHECK(std::abs(p[0]) < 1e-15);
  CHECK(std::abs(p[1]) < 1e-15);
  CHECK(agem_project(std::vector<double>{1, 2}, std::vector<double>{0, 0}) == std::vector<double>{1, 2});
}

TEST_CASE("A-GEM projections never point against the reference") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> g(n), r(n);
    for (double& v : g) v = rng.normal();
    for (double& v : r) v = rng.normal();
    const auto p = agem_project(g, r);
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += p[i] * r[i];
    CHECK(dot >= -1e-10);
  }
}

TEST_CASE("DER logit matching") {
  CachedLogits cached{{1.0, 0.0}, {1.0, 0.0}};
  const SpanDistribution zero = SpanDistribution::from_logits(Tensor::vector({0, 0}), Tensor::vector({0, 0}));
  // Mean squared error 0.5 per head, summed over the two heads.
  CHECK(logit_mse(cached, zero).item() == doctest::Approx(1.0));
  const SpanDistribution same = SpanDistribution::from_logits(Tensor::vector({1, 0}), Tensor::vector({1, 0}));
  CHECK(logit_mse(cached, same).item() == 0.0);

  Rng rng(3);
  const BackboneModel model(tiny_model(), rng);
  MemoryItem a = item_for({0, 4, 1, 5, 6, 7, 1}, 3, 4);
  MemoryItem b = item_for({0, 9, 1, 10, 11, 1}, 3, 3);
  a.teacher_logits = cache_logits(model, a.sample);
  b.teacher_logits = cache_logits(model, b.sample);
  const std::vector<const MemoryItem*> batch{&a, &b};
  CHECK(der_loss(model, batch, 0.5).item() == 0.0);

  for (double& v : b.teacher_logits->start) v += 1.0;
  CHECK(der_loss(model, batch, 0.5).item() == doctest::Approx(0.5 * 0.5 * 1.0));
  CHECK(derpp_loss(model, batch, 0.5, 0.0).item() == der_loss(model, batch, 0.5).item());
  const double span = 0.5 * (span_loss(model.forward(a.sample.input_ids), 3, 4).item() +
                             span_loss(model.forward(b.sample.input_ids), 3, 3).item());
  CHECK(derpp_loss(model, batch, 0.5, 0.25).item() ==
        doctest::Approx(der_loss(model, batch, 0.5).item() + 0.25 * span).epsilon(1e-12));
}

TEST_CASE("items without cached logits are skipped with a warning") {
  QuietWarnings quiet;
  Rng rng(4);
  const BackboneModel model(tiny_model(), rng);
  MemoryItem bare = item_for({0, 4, 1, 5, 6, 1}, 3, 3);
  const std::vector<const MemoryItem*> batch{&bare};
  const std::size_t before = warning_count();
  CHECK(der_loss(model, batch, 0.5).item() == 0.0);
  CHECK(warning_count() == before + 1);
}

// ---------------------------------------------------------------------------
// Config

TEST_CASE("config JSON round-trips and rejects unknown keys") {
  ContinualConfig c;
  c.method = Method::derpp;
  c.order = {2, 0, 1};
  c.weights.derpp_beta = 0.3;
  c.model.hidden = 48;
  c.norm = NormStrategy::norm2;
  c.uncertainty = UncertaintyKind::prob;
  c.mmd_kernel = MmdKernel::rbf;
  CHECK(config_from_json(config_to_json(c)) == c);
  CHECK(config_hash(c) == config_hash(config_from_json(config_to_json(c))));
  ContinualConfig other = c;
  other.seed = 1;
  CHECK(config_hash(other) != config_hash(c));

  CHECK_THROWS(config_from_json(nlohmann::json{{"methd", "lower"}}));
  CHECK_THROWS(config_from_json(nlohmann::json{{"weights", {{"advv", 1.0}}}}));
  CHECK_THROWS(config_from_json(nlohmann::json{{"model", {{"hiden", 8}}}}));
  CHECK_THROWS(config_from_json(nlohmann::json{{"method", "bogus"}}));
  CHECK(config_from_json(nlohmann::json{{"memory_capacity", 7}}).memory_capacity == 7);
}

TEST_CASE("config validation") {
  ContinualConfig c;
  c.order = {0, 0, 1};
  CHECK_THROWS_AS(c.validate(3), std::invalid_argument);
  c.order = {0, 1};
  CHECK_THROWS_AS(c.validate(3), std::invalid_argument);
  c.order = {2, 0, 1};
  CHECK_NOTHROW(c.validate(3));
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(3), std::invalid_argument);
}

TEST_CASE("enum names round-trip") {
  for (Method m : {Method::ma_mrc, Method::lower, Method::upper, Method::ewc, Method::online_ewc, Method::agem,
                   Method::der, Method::derpp})
    CHECK(parse_method(to_string(m)) == m);
  CHECK(parse_norm("norm2") == NormStrategy::norm2);
  CHECK(parse_uncertainty("random") == UncertaintyKind::random);
  CHECK(parse_kernel("rbf") == MmdKernel::rbf);
  CHECK_THROWS(parse_method("nope"));
}

// ---------------------------------------------------------------------------
// Runs

TEST_CASE("every method completes a short stream with a lower-triangular report") {
  QuietWarnings quiet;
  for (Method m : {Method::ma_mrc, Method::lower, Method::upper, Method::ewc, Method::online_ewc, Method::agem,
                   Method::der, Method::derpp}) {
    Fixture f = fixture(m);
    const RunResult r = run_stream(f.data, f.config);
    CAPTURE(to_string(m));
    REQUIRE(r.report.steps.size() == 3);
    for (std::size_t t = 0; t < 3; ++t) {
      CHECK(r.report.steps[t].scores.size() == t + 1);
      CHECK(r.report.steps[t].f1_avg >= 0.0);
      CHECK(r.report.steps[t].f1_avg <= 100.0);
    }
    CHECK(r.step_seconds.size() == 3);
    CHECK(r.report.metadata.at("method") == to_string(m));
  }
}

TEST_CASE("the first step trains to a lower loss") {
  Fixture f = fixture(Method::lower, 1, 64);
  f.config.epochs = 6;
  f.config.model.hidden = 16;
  std::vector<double> losses;
  RunHooks hooks;
  hooks.on_update = [&](const UpdateContext& u) { losses.push_back(u.loss); };
  (void)run_stream(f.data, f.config, hooks);
  REQUIRE(losses.size() >= 16);
  auto mean = [](auto b, auto e) { return std::accumulate(b, e, 0.0) / static_cast<double>(e - b); };
  const double first = mean(losses.begin(), losses.begin() + 16);
  const double last = mean(losses.end() - 16, losses.end());
  MESSAGE("batch loss " << first << " -> " << last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("memory after the first step holds min(capacity, |D_1|) items") {
  Fixture f = fixture(Method::ma_mrc);
  std::vector<std::size_t> sizes;
  RunHooks hooks;
  hooks.on_step_end = [&](const StepContext& c) { sizes.push_back(c.memory->size()); };
  (void)run_stream(f.data, f.config, hooks);
  CHECK(sizes.front() == 6);
  QuietWarnings quiet;
  f.config.memory_capacity = 100;
  sizes.clear();
  (void)run_stream(f.data, f.config, hooks);
  CHECK(sizes.front() == 24);
}

TEST_CASE("an empty-memory adversarial run reproduces the lower bound exactly") {
  QuietWarnings quiet;
  Fixture f = fixture(Method::ma_mrc);
  f.config.memory_capacity = 0;
  f.config.weights.adv = 0.0;
  f.config.weights.kl = 0.0;
  const RunResult ma = run_stream(f.data, f.config);
  f.config.method = Method::lower;
  const RunResult lower = run_stream(f.data, f.config);
  CHECK(parameter_values(ma.model) == parameter_values(lower.model));
  CHECK(ma.report.steps == lower.report.steps);
}

TEST_CASE("DER++ with zero beta follows DER exactly") {
  Fixture f = fixture(Method::der);
  const RunResult der = run_stream(f.data, f.config);
  f.config.method = Method::derpp;
  f.config.weights.derpp_beta = 0.0;
  const RunResult derpp = run_stream(f.data, f.config);
  CHECK(parameter_values(der.model) == parameter_values(derpp.model));
}

TEST_CASE("EWC with one past task follows online EWC with gamma one") {
  Fixture f = fixture(Method::ewc, 2);
  const RunResult ewc = run_stream(f.data, f.config);
  f.config.method = Method::online_ewc;
  f.config.weights.online_gamma = 1.0;
  const RunResult online = run_stream(f.data, f.config);
  CHECK(parameter_values(ewc.model) == parameter_values(online.model));
}

TEST_CASE("the teacher stays fixed within a step") {
  Fixture f = fixture(Method::ma_mrc);
  const std::vector<int> probe = f.data[2].test.front().input_ids;
  std::map<std::size_t, std::vector<double>> end_of_step;
  std::map<std::size_t, std::set<std::vector<double>>> seen;
  std::size_t teacher_updates = 0;
  RunHooks hooks;
  hooks.on_step_end = [&](const StepContext& c) {
    end_of_step[c.step] = c.model->forward(probe).start_logits.to_vector();
  };
  hooks.on_update = [&](const UpdateContext& u) {
    if (!u.teacher) return;
    ++teacher_updates;
    seen[u.step].insert(u.teacher->forward(probe).start_logits.to_vector());
  };
  (void)run_stream(f.data, f.config, hooks);
  CHECK(teacher_updates > 0);
  for (const auto& [step, values] : seen) {
    CHECK(values.size() == 1);
    CHECK(*values.begin() == end_of_step.at(step - 1));
  }
}

TEST_CASE("earlier domains are reachable only through memory") {
  QuietWarnings quiet;
  for (Method m : {Method::ma_mrc, Method::agem, Method::der, Method::derpp, Method::ewc, Method::lower}) {
    Fixture f = fixture(m);
    f.config.order = {1, 2, 0};
    std::set<std::string> allowed_memory;
    std::size_t violations = 0, memory_uses = 0;
    RunHooks hooks;
    hooks.on_train_sample = [&](std::size_t step, const Sample& s) {
      if (s.domain == static_cast<int>(f.config.order[step])) return;
      if (allowed_memory.count(s.id)) {
        ++memory_uses;
      } else {
        ++violations;
      }
    };
    hooks.on_step_end = [&](const StepContext& c) {
      allowed_memory.clear();
      for (const auto& it : c.memory->items) allowed_memory.insert(it.sample.id);
    };
    (void)run_stream(f.data, f.config, hooks);
    CAPTURE(to_string(m));
    CHECK(violations == 0);
    const bool replays = m != Method::ewc && m != Method::lower;
    CHECK((memory_uses > 0) == replays);
  }
}

TEST_CASE("the upper bound retrains on every seen domain") {
  Fixture f = fixture(Method::upper);
  std::vector<std::size_t> counts;
  RunHooks hooks;
  hooks.on_step_end = [&](const StepContext& c) { counts.push_back(c.trained_samples); };
  (void)run_stream(f.data, f.config, hooks);
  CHECK(counts == std::vector<std::size_t>{24, 48, 72});
}

TEST_CASE("with one domain the lower and upper bounds coincide") {
  Fixture f = fixture(Method::lower, 1);
  const RunResult lower = run_stream(f.data, f.config);
  f.config.method = Method::upper;
  const RunResult upper = run_stream(f.data, f.config);
  CHECK(parameter_values(lower.model) == parameter_values(upper.model));
  CHECK(lower.report.steps == upper.report.steps);
  REQUIRE(lower.report.steps.size() == 1);
}

TEST_CASE("domains are visited in the configured order") {
  Fixture f = fixture(Method::lower);
  f.config.order = {2, 0, 1};
  const RunResult r = run_stream(f.data, f.config);
  CHECK(r.report.metadata.at("order") == nlohmann::json{2, 0, 1});
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(r.report.steps[t].domain == f.config.order[t]);
    CHECK(r.report.steps[t].domain_name == f.data[f.config.order[t]].name);
    for (std::size_t s = 0; s <= t; ++s) CHECK(r.report.steps[t].scores[s].domain == f.config.order[s]);
  }
}

TEST_CASE("identical configs give identical reports") {
  Fixture f = fixture(Method::ma_mrc);
  const RunResult a = run_stream(f.data, f.config);
  const RunResult b = run_stream(f.data, f.config);
  CHECK(report_to_json(a.report).dump() == report_to_json(b.report).dump());
  CHECK(parameter_values(a.model) == parameter_values(b.model));
  f.config.seed = 6;
  const RunResult c = run_stream(f.data, f.config);
  CHECK(parameter_values(a.model) != parameter_values(c.model));
}

TEST_CASE("an interrupted run resumes to the same result") {
  QuietWarnings quiet;
  for (Method m : {Method::ma_mrc, Method::ewc, Method::der}) {
    Fixture f = fixture(m);
    const RunResult whole = run_stream(f.data, f.config);
    const fs::path dir = fs::temp_directory_path() / ("cmrc_test_resume_" + to_string(m));
    fs::remove_all(dir);
    RunOptions first;
    first.state_dir = dir;
    first.stop_after_steps = 1;
    const RunResult partial = run_stream(f.data, f.config, {}, first);
    CHECK(partial.report.steps.size() == 1);
    RunOptions rest;
    rest.state_dir = dir;
    const RunResult resumed = run_stream(f.data, f.config, {}, rest);
    CAPTURE(to_string(m));
    CHECK(resumed.report.steps == whole.report.steps);
    CHECK(parameter_values(resumed.model) == parameter_values(whole.model));

    // A different config in the same directory starts over.
    ContinualConfig changed = f.config;
    changed.seed = 99;
    const RunResult fresh = run_stream(f.data, changed, {}, rest);
    CHECK(fresh.report.metadata.at("seed") == 99);
    fs::remove_all(dir);
  }
}

TEST_CASE("evaluation scores percentages and counts samples") {
  Fixture f = fixture(Method::lower, 1);
  Rng rng(7);
  const BackboneModel model(f.config.model, rng);
  const DomainScore s = evaluate_domain(model, f.data[0], 0, 16);
  CHECK(s.count == 12);
  CHECK(s.f1 >= 0.0);
  CHECK(s.f1 <= 100.0);
  double em = -1.0;
  const double f1 = evaluate_domain_f1(model, f.data[0].test, 16, &em);
  CHECK(f1 * 100.0 == doctest::Approx(s.f1));
  CHECK(em * 100.0 == doctest::Approx(s.em));
}
