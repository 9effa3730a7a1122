#pragma once

#include <span>
#include <vector>

#include "cmrc/backbone.hpp"

namespace cmrc {

// Frozen copy of the previous-step model. Its parameters never require
// gradients, so nothing it computes is recorded on a graph.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const BackboneModel& model) : model_(model.clone(false)) {}

  SpanDistribution forward(std::span<const int> input_ids) const;
  const BackboneModel& model() const { return model_; }

 private:
  BackboneModel model_;
};

inline TeacherSnapshot snapshot_teacher(const BackboneModel& model) { return TeacherSnapshot(model); }

// KL(softmax(teacher/T) || softmax(student/T)) over start logits plus the same
// over end logits. Teacher logits are constants.
Tensor kl_distill_loss(std::span<const double> teacher_start, std::span<const double> teacher_end,
                       const SpanDistribution& student, double temperature = 1.0);
Tensor kl_distill_loss(const SpanDistribution& teacher, const SpanDistribution& student, double temperature = 1.0);

}  // namespace cmrc
