#include "evl/relation.hpp"

#include "evl/errors.hpp"

namespace evl {

namespace {
constexpr double kMeanFloor = 1e-12;
constexpr double kCosineFloor = 1e-12;

void require_pairs(const Tensor& h, const char* op) {
  if (h.rank() != 2) throw DimensionError(std::string(op) + " expects L x D, got " + shape_str(h.shape()));
  if (h.rows() < 2) {
    throw InputError(std::string(op) + " needs at least two rows, got " + shape_str(h.shape()));
  }
}
}  // namespace

Var distance_potential(Var h) {
  require_pairs(h.value(), "distance_potential");
  const std::size_t l = h.value().rows();
  Var d = pairwise_distance(h);
  Var mu = scale(sum(d), 1.0 / static_cast<double>(l * (l - 1)));
  if (mu.value().item() < kMeanFloor) return h.tape().constant(Tensor({l, l}, 0.0));
  return div(d, mu);
}

Var angle_potential(Var h) {
  require_pairs(h.value(), "angle_potential");
  Var gram = matmul(h, transpose(h));
  Var norms = row_norms(h);
  Var denom = clamp_min(matmul(norms, transpose(norms)), kCosineFloor);
  return div(gram, denom);
}

PotentialMatrix distance_potential(const Tensor& h) {
  Tape tape;
  return {distance_potential(tape.constant(h)).value(), PotentialKind::distance};
}

PotentialMatrix angle_potential(const Tensor& h) {
  Tape tape;
  return {angle_potential(tape.constant(h)).value(), PotentialKind::angle};
}

RelationTerms relation_sample_terms(Var aligned_teacher, Var student, std::size_t batch,
                                    bool detach_teacher) {
  if (aligned_teacher.shape() != student.shape()) {
    throw InputError("relation_loss shape mismatch: " + shape_str(aligned_teacher.shape()) +
                     " vs " + shape_str(student.shape()));
  }
  const std::size_t l = student.value().rows();
  Var target = detach_teacher ? detach(aligned_teacher) : aligned_teacher;
  const double norm = 1.0 / static_cast<double>(batch * l * l);
  Var dist = scale(sum(square(sub(distance_potential(target), distance_potential(student)))), norm);
  Var angle = scale(sum(square(sub(angle_potential(target), angle_potential(student)))), norm);
  return {dist, angle, scale(add(dist, angle), 0.5)};
}

RelationTerms relation_loss(std::span<const Var> aligned_teacher, std::span<const Var> student,
                            bool detach_teacher) {
  if (aligned_teacher.size() != student.size() || student.empty()) {
    throw InputError("relation_loss batch mismatch");
  }
  const std::size_t batch = student.size();
  RelationTerms acc = relation_sample_terms(aligned_teacher[0], student[0], batch, detach_teacher);
  for (std::size_t b = 1; b < batch; ++b) {
    RelationTerms t = relation_sample_terms(aligned_teacher[b], student[b], batch, detach_teacher);
    acc.dist = add(acc.dist, t.dist);
    acc.angle = add(acc.angle, t.angle);
  }
  acc.rel = scale(add(acc.dist, acc.angle), 0.5);
  return acc;
}

RelationLosses relation_loss(const FeatureBatch& aligned_teacher, const FeatureBatch& student) {
  if (aligned_teacher.states().shape() != student.states().shape()) {
    throw InputError("relation_loss shape mismatch: " + shape_str(aligned_teacher.states().shape()) +
                     " vs " + shape_str(student.states().shape()));
  }
  Tape tape;
  std::vector<Var> t, s;
  for (std::size_t b = 0; b < student.batch(); ++b) {
    t.push_back(tape.constant(aligned_teacher.sample(b)));
    s.push_back(tape.constant(student.sample(b)));
  }
  RelationTerms r = relation_loss(t, s);
  return {r.dist.value().item(), r.angle.value().item(), r.rel.value().item()};
}

}  // namespace evl
