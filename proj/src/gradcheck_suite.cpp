#include <cstdint>
#include <vector>

#include "cmrc/adversarial.hpp"
#include "cmrc/backbone.hpp"
#include "cmrc/distill.hpp"
#include "cmrc/engine.hpp"
#include "cmrc/gradcheck.hpp"
#include "cmrc/rng.hpp"

namespace cmrc {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.mutable_data()) v = scale * rng.normal();
  return t;
}

std::vector<int> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> ids(n);
  for (int& id : ids) id = static_cast<int>(rng.below(vocab));
  return ids;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.max_len = 8;
  c.ffn_mult = 2;
  c.init_std = 0.5;  // larger than training init so every path carries signal
  return c;
}

Sample tiny_sample(Rng& rng, std::size_t length, std::size_t vocab) {
  Sample s;
  s.input_ids = random_ids(length, vocab, rng);
  s.answer_start = static_cast<int>(rng.range(1, static_cast<std::int64_t>(length) - 2));
  s.answer_end = s.answer_start + static_cast<int>(rng.below(2));
  s.answer_ids.assign(s.input_ids.begin() + s.answer_start, s.input_ids.begin() + s.answer_end + 1);
  return s;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  using namespace ops;
  std::vector<GradcheckResult> results;
  auto record = [&](std::string name, double err) { results.push_back({std::move(name), err, err < tolerance}); };
  Rng root(seed);

  {
    Rng rng = root.fork("primitives");
    const Tensor x = random_tensor({3, 5}, rng);
    const Tensor gamma = random_tensor({5}, rng);
    const Tensor beta = random_tensor({5}, rng);
    const Tensor w = random_tensor({5, 4}, rng);
    const Tensor ln_probe = random_tensor({3, 5}, rng).detach();
    record("layer_norm", finite_difference_check([&] { return sum(mul(layer_norm(x, gamma, beta), ln_probe)); },
                                                 {x, gamma, beta}));
    const Tensor probe = random_tensor({3, 4}, rng).detach();
    record("gelu_matmul", finite_difference_check([&] { return sum(mul(gelu(matmul(x, w)), probe)); }, {x, w}));
    record("softmax", finite_difference_check([&] { return sum(mul(softmax(matmul(x, w)), probe)); }, {x, w}));
    record("log_softmax", finite_difference_check([&] { return sum(mul(log_softmax(matmul(x, w)), probe)); }, {x, w}));
  }

  const ModelConfig config = tiny_config();
  Rng model_rng = root.fork("model");
  BackboneModel model(config, model_rng);
  Rng sample_rng = root.fork("samples");
  const Sample sample = tiny_sample(sample_rng, 8, config.vocab_size);
  const std::vector<Tensor> params = model.parameters();

  record("span_loss", finite_difference_check(
                          [&] { return span_loss(model.forward(sample.input_ids), sample.answer_start, sample.answer_end); },
                          params));

  {
    Rng rng = root.fork("adversarial");
    Discriminator disc(8, rng);
    const Tensor mem = random_tensor({3, 8}, rng);
    const Tensor cur = random_tensor({4, 8}, rng);
    std::vector<Tensor> disc_params = disc.parameters();
    record("adversarial_core_reprs",
           finite_difference_check([&] { return adversarial_losses(disc, mem, cur).core; }, {mem, cur}));
    record("adversarial_encoder_loss",
           finite_difference_check([&] { return adversarial_losses(disc, mem, cur).encoder_loss; }, {mem, cur}));
    record("adversarial_discriminator_loss",
           finite_difference_check([&] { return adversarial_losses(disc, mem, cur).discriminator_loss; }, disc_params));
    record("mmd_linear", finite_difference_check([&] { return mmd(mem, cur); }, {mem, cur}));
    AdversarialOptions rbf;
    rbf.kernel = MmdKernel::rbf;
    rbf.rbf_bandwidth = 2.0;
    record("mmd_rbf", finite_difference_check([&] { return mmd(mem, cur, rbf); }, {mem, cur}));
  }

  {
    Rng rng = root.fork("distill");
    const Tensor student = random_tensor({8}, rng);
    const Tensor student_end = random_tensor({8}, rng);
    std::vector<double> t_start(8), t_end(8);
    for (double& v : t_start) v = rng.normal();
    for (double& v : t_end) v = rng.normal();
    record("kl_logits", finite_difference_check(
                            [&] {
                              return kl_distill_loss(t_start, t_end, SpanDistribution::from_logits(student, student_end),
                                                     2.0);
                            },
                            {student, student_end}));
    record("kl_model", finite_difference_check(
                           [&] { return kl_distill_loss(t_start, t_end, model.forward(sample.input_ids), 1.0); },
                           params));
  }

  {
    // Joint objective: span loss on a mixed batch, encoder side of the game,
    // KL on the memory sample.
    Rng rng = root.fork("objective");
    const Sample other = tiny_sample(rng, 7, config.vocab_size);
    Discriminator disc(config.hidden, rng);
    BackboneModel teacher_model = model.clone(false);
    for (Tensor p : teacher_model.parameters())
      for (double& v : p.mutable_data()) v += 0.1 * rng.normal();
    const TeacherSnapshot teacher(teacher_model);
    record("joint_objective", finite_difference_check(
                                  [&] {
                                    const Tensor enc_mem = model.encode(sample.input_ids);
                                    const Tensor enc_cur = model.encode(other.input_ids);
                                    const SpanDistribution d_mem = model.predict_spans(enc_mem);
                                    const SpanDistribution d_cur = model.predict_spans(enc_cur);
                                    const Tensor span = scale(
                                        add(span_loss(d_mem, sample.answer_start, sample.answer_end),
                                            span_loss(d_cur, other.answer_start, other.answer_end)),
                                        0.5);
                                    const Tensor adv = adversarial_losses(disc, reshape(pooled_repr(enc_mem), {1, 8}),
                                                                          reshape(pooled_repr(enc_cur), {1, 8}))
                                                           .encoder_loss;
                                    const Tensor kl = kl_distill_loss(teacher.forward(sample.input_ids), d_mem);
                                    return add_n({span, adv, kl});
                                  },
                                  params));
  }

  {
    Rng rng = root.fork("ewc");
    std::vector<Tensor> leaves{random_tensor({3, 4}, rng), random_tensor({5}, rng)};
    FisherState state;
    for (const Tensor& leaf : leaves) {
      Tensor f = Tensor::zeros(leaf.shape());
      for (double& v : f.mutable_data()) v = rng.uniform();
      state.fisher.push_back(f);
      state.anchor.push_back(random_tensor(leaf.shape(), rng).detach());
    }
    const std::vector<FisherState> states{state, state};
    record("ewc_penalty", finite_difference_check([&] { return ewc_penalty(leaves, states, 10.0); }, leaves));
  }

  {
    Rng rng = root.fork("der");
    MemoryItem item;
    item.sample = sample;
    CachedLogits cached;
    for (std::size_t i = 0; i < sample.input_ids.size(); ++i) {
      cached.start.push_back(rng.normal());
      cached.end.push_back(rng.normal());
    }
    item.teacher_logits = cached;
    const std::vector<const MemoryItem*> batch{&item};
    record("der_loss", finite_difference_check([&] { return der_loss(model, batch, 0.5); }, params));
    record("derpp_loss", finite_difference_check([&] { return derpp_loss(model, batch, 0.5, 0.5); }, params));
  }

  return results;
}

}  // namespace cmrc
