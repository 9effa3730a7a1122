#include "cmrc/distill.hpp"

#include <cmath>
#include <stdexcept>

namespace cmrc {

SpanDistribution TeacherSnapshot::forward(std::span<const int> input_ids) const {
  NoGradGuard no_grad;
  return model_.forward(input_ids);
}

namespace {

Tensor kl_one_head(std::span<const double> teacher_logits, const Tensor& student_logits, double temperature) {
  using namespace ops;
  const std::size_t l = teacher_logits.size();
  std::vector<double> t(teacher_logits.begin(), teacher_logits.end());
  for (double& v : t) v /= temperature;
  std::vector<double> log_p(l);
  double mx = t[0];
  for (double v : t) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : t) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> p(l);
  double entropy_term = 0.0;  // sum p log p
  for (std::size_t i = 0; i < l; ++i) {
    log_p[i] = t[i] - lse;
    p[i] = std::exp(log_p[i]);
    entropy_term += p[i] * log_p[i];
  }
  const Tensor log_q = log_softmax(scale(student_logits, 1.0 / temperature));
  // sum p (log p - log q)
  return affine(neg(sum(mul(Tensor::vector(std::move(p)), log_q))), 1.0, entropy_term);
}

}  // namespace

Tensor kl_distill_loss(std::span<const double> teacher_start, std::span<const double> teacher_end,
                       const SpanDistribution& student, double temperature) {
  if (teacher_start.size() != student.length() || teacher_end.size() != student.length()) {
    throw std::invalid_argument("kl_distill_loss: teacher length " + std::to_string(teacher_start.size()) +
                                " vs student length " + std::to_string(student.length()));
  }
  if (temperature <= 0.0) throw std::invalid_argument("kl_distill_loss: temperature must be positive");
  return ops::add(kl_one_head(teacher_start, student.start_logits, temperature),
                  kl_one_head(teacher_end, student.end_logits, temperature));
}

Tensor kl_distill_loss(const SpanDistribution& teacher, const SpanDistribution& student, double temperature) {
  return kl_distill_loss(teacher.start_logits.data(), teacher.end_logits.data(), student, temperature);
}

}  // namespace cmrc
