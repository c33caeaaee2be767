#pragma once

#include <span>

#include "evl/autodiff.hpp"
#include "evl/mhca.hpp"

namespace evl {

enum class PotentialKind { distance, angle };

struct PotentialMatrix {
  Tensor values;  // L x L
  PotentialKind kind = PotentialKind::distance;
};

// ||h_i - h_j|| divided by the mean distance over the i != j pairs. When that
// mean is below 1e-12 (all rows identical) the potential is all zeros.
Var distance_potential(Var h);
// <h_i, h_j> / max(||h_i|| ||h_j||, 1e-12).
Var angle_potential(Var h);

PotentialMatrix distance_potential(const Tensor& h);
PotentialMatrix angle_potential(const Tensor& h);

struct RelationTerms {
  Var dist;
  Var angle;
  Var rel;
};

// One sample's share of L_D and L_A, i.e. already divided by B * L_s^2.
// The teacher-side potentials are targets when detach_teacher is set.
RelationTerms relation_sample_terms(Var aligned_teacher, Var student, std::size_t batch,
                                    bool detach_teacher = true);
RelationTerms relation_loss(std::span<const Var> aligned_teacher, std::span<const Var> student,
                            bool detach_teacher = true);

struct RelationLosses {
  double dist = 0.0;
  double angle = 0.0;
  double rel = 0.0;
};

RelationLosses relation_loss(const FeatureBatch& aligned_teacher, const FeatureBatch& student);

}  // namespace evl
