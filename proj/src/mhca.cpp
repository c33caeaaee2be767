#include "evl/mhca.hpp"

#include <algorithm>
#include <cmath>

#include "evl/errors.hpp"

namespace evl {

FeatureBatch::FeatureBatch(Tensor states) : states_(std::move(states)) {
  if (states_.rank() != 3) {
    throw DimensionError("FeatureBatch expects B x L x D, got " + shape_str(states_.shape()));
  }
  if (!states_.all_finite()) throw InputError("FeatureBatch has non-finite values");
}

FeatureBatch FeatureBatch::from_samples(const std::vector<Tensor>& samples) {
  return FeatureBatch(stack0(samples));
}

MhcaParams MhcaParams::init(std::size_t student_width, std::size_t teacher_width,
                            std::size_t heads, std::uint64_t seed) {
  if (heads == 0 || student_width == 0 || teacher_width == 0) {
    throw ContractError("MHCA widths and head count must be positive");
  }
  if (student_width % heads != 0) {
    throw ContractError("student width " + std::to_string(student_width) +
                        " is not divisible by " + std::to_string(heads) + " heads");
  }
  MhcaParams p;
  p.heads = heads;
  p.head_width = student_width / heads;
  p.student_width = student_width;
  p.teacher_width = teacher_width;
  const std::size_t inner = heads * p.head_width;
  std::mt19937_64 rng(seed);
  p.query = {"mhca.query", init_uniform(student_width, inner, rng), {}};
  p.key = {"mhca.key", init_uniform(teacher_width, inner, rng), {}};
  p.value = {"mhca.value", init_uniform(teacher_width, inner, rng), {}};
  p.output = {"mhca.output", init_uniform(inner, student_width, rng), {}};
  for (Parameter* q : p.parameters()) q->zero_grad();
  return p;
}

std::vector<Parameter*> MhcaParams::parameters() { return {&query, &key, &value, &output}; }

void MhcaParams::validate() const {
  const std::size_t inner = heads * head_width;
  if (heads == 0 || head_width == 0) throw ContractError("MHCA needs at least one head");
  if (query.value.shape() != Shape{student_width, inner} ||
      key.value.shape() != Shape{teacher_width, inner} ||
      value.value.shape() != Shape{teacher_width, inner} ||
      output.value.shape() != Shape{inner, student_width}) {
    throw DimensionError("MHCA parameter shapes are inconsistent with h=" +
                         std::to_string(heads) + ", d_k=" + std::to_string(head_width));
  }
}

MhcaWeights bind(Tape& tape, const MhcaParams& params, bool trainable) {
  params.validate();
  return {tape.leaf(params.query.value, trainable), tape.leaf(params.key.value, trainable),
          tape.leaf(params.value.value, trainable), tape.leaf(params.output.value, trainable)};
}

MhcaOutput mhca_forward(Var student, Var teacher, const MhcaWeights& w, const MhcaParams& shape,
                        bool detach_query) {
  const Tensor& hs = student.value();
  const Tensor& ht = teacher.value();
  if (hs.rank() != 2 || hs.cols() != shape.student_width) {
    throw DimensionError("student states " + shape_str(hs.shape()) + " do not have width " +
                         std::to_string(shape.student_width));
  }
  if (ht.rank() != 2 || ht.cols() != shape.teacher_width) {
    throw DimensionError("teacher states " + shape_str(ht.shape()) + " do not have width " +
                         std::to_string(shape.teacher_width));
  }
  Var query_in = detach_query ? detach(student) : student;
  Var q = matmul(query_in, w.query);
  Var k = matmul(teacher, w.key);
  Var v = matmul(teacher, w.value);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(shape.head_width));

  MhcaOutput out;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < shape.heads; ++h) {
    const std::size_t off = h * shape.head_width;
    Var qh = slice_cols(q, off, shape.head_width);
    Var kh = slice_cols(k, off, shape.head_width);
    Var vh = slice_cols(v, off, shape.head_width);
    Var weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
    out.attention.push_back(weights);
    heads.push_back(matmul(weights, vh));
  }
  out.aligned = matmul(concat_cols(heads), w.output);
  return out;
}

FeatureBatch mhca_forward(const FeatureBatch& student, const FeatureBatch& teacher,
                          const MhcaParams& params) {
  if (student.batch() != teacher.batch()) {
    throw DimensionError("batch mismatch: student " + shape_str(student.states().shape()) +
                         " vs teacher " + shape_str(teacher.states().shape()));
  }
  std::vector<Tensor> outs;
  for (std::size_t b = 0; b < student.batch(); ++b) {
    Tape tape;
    MhcaWeights w = bind(tape, params, false);
    outs.push_back(mhca_forward(tape.constant(student.sample(b)), tape.constant(teacher.sample(b)),
                                w, params)
                       .aligned.value());
  }
  return FeatureBatch::from_samples(outs);
}

Var mhca_sample_loss(Var student, Var aligned, std::size_t batch) {
  if (student.shape() != aligned.shape()) {
    throw DimensionError("mhca_loss shape mismatch: " + shape_str(student.shape()) + " vs " +
                         shape_str(aligned.shape()));
  }
  const double positions = static_cast<double>(batch * student.value().rows());
  return scale(sum(square(sub(student, aligned))), 1.0 / positions);
}

Var mhca_loss(std::span<const Var> student, std::span<const Var> aligned) {
  if (student.size() != aligned.size() || student.empty()) {
    throw DimensionError("mhca_loss batch mismatch: " + std::to_string(student.size()) + " vs " +
                         std::to_string(aligned.size()));
  }
  Var total = mhca_sample_loss(student[0], aligned[0], student.size());
  for (std::size_t b = 1; b < student.size(); ++b)
    total = add(total, mhca_sample_loss(student[b], aligned[b], student.size()));
  return total;
}

double mhca_loss(const FeatureBatch& student, const FeatureBatch& aligned) {
  if (student.states().shape() != aligned.states().shape()) {
    throw DimensionError("mhca_loss shape mismatch: " + shape_str(student.states().shape()) +
                         " vs " + shape_str(aligned.states().shape()));
  }
  Tape tape;
  std::vector<Var> s, a;
  for (std::size_t b = 0; b < student.batch(); ++b) {
    s.push_back(tape.constant(student.sample(b)));
    a.push_back(tape.constant(aligned.sample(b)));
  }
  return mhca_loss(s, a).value().item();
}

EotCheckReport eot_equivalence_check(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() ||
      k.rows() != v.rows()) {
    throw DimensionError("eot_equivalence_check shapes: Q " + shape_str(q.shape()) + ", K " +
                         shape_str(k.shape()) + ", V " + shape_str(v.shape()));
  }
  const std::size_t ls = q.rows(), lt = k.rows(), dk = q.cols();
  const double eps = std::sqrt(static_cast<double>(dk));

  // Attention route through the differentiable primitives.
  Tape tape;
  Var kq = tape.constant(q);
  Var kk = tape.constant(k);
  Var weights = softmax_rows(scale(matmul(kq, transpose(kk)), 1.0 / eps));
  Var attended = matmul(weights, tape.constant(v));

  // Entropic route: pi_mn = exp(-C_mn / eps) / sum_j exp(-C_mj / eps), C = -Q K^T.
  EotCheckReport report;
  report.epsilon_used = eps;
  std::vector<double> cost(lt), pi(lt);
  for (std::size_t m = 0; m < ls; ++m) {
    for (std::size_t n = 0; n < lt; ++n) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dk; ++d) dot += q(m, d) * k(n, d);
      cost[n] = -dot;
    }
    const double cmin = *std::min_element(cost.begin(), cost.end());
    double z = 0.0;
    for (std::size_t n = 0; n < lt; ++n) {
      pi[n] = std::exp(-(cost[n] - cmin) / eps);
      z += pi[n];
    }
    for (std::size_t n = 0; n < lt; ++n) {
      pi[n] /= z;
      report.max_weight_deviation =
          std::max(report.max_weight_deviation, std::abs(pi[n] - weights.value()(m, n)));
    }
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double proj = 0.0;
      for (std::size_t n = 0; n < lt; ++n) proj += pi[n] * v(n, c);
      report.max_projection_deviation =
          std::max(report.max_projection_deviation, std::abs(proj - attended.value()(m, c)));
    }
  }
  return report;
}

}  // namespace evl
