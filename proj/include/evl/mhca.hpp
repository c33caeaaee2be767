#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evl/autodiff.hpp"
#include "evl/parameter.hpp"
#include "evl/tensor.hpp"

namespace evl {

// B x L x D hidden states.
class FeatureBatch {
 public:
  FeatureBatch() = default;
  explicit FeatureBatch(Tensor states);
  static FeatureBatch from_samples(const std::vector<Tensor>& samples);

  const Tensor& states() const { return states_; }
  std::size_t batch() const { return states_.shape()[0]; }
  std::size_t length() const { return states_.shape()[1]; }
  std::size_t width() const { return states_.shape()[2]; }
  Tensor sample(std::size_t b) const { return states_.slice0(b); }

 private:
  Tensor states_;
};

// Per-head projections are stored side by side: columns [i*d_k, (i+1)*d_k)
// of query/key/value belong to head i.
struct MhcaParams {
  std::size_t heads = 0;
  std::size_t head_width = 0;
  std::size_t student_width = 0;
  std::size_t teacher_width = 0;
  Parameter query;   // D_s x (h * d_k)
  Parameter key;     // D_t x (h * d_k)
  Parameter value;   // D_t x (h * d_k)
  Parameter output;  // (h * d_k) x D_s

  // d_k = student_width / heads; the width must divide evenly.
  static MhcaParams init(std::size_t student_width, std::size_t teacher_width, std::size_t heads,
                         std::uint64_t seed);
  std::vector<Parameter*> parameters();
  void validate() const;
};

struct MhcaWeights {
  Var query, key, value, output;
};

// Binds parameters as gradient-carrying leaves (or constants) on a tape.
MhcaWeights bind(Tape& tape, const MhcaParams& params, bool trainable = true);

struct MhcaOutput {
  Var aligned;                     // L_s x D_s
  std::vector<Var> attention;      // one L_s x L_t weight matrix per head
};

// Cross-attention of one sample: student (L_s x D_s) queries teacher (L_t x D_t).
// With detach_query the query path carries no gradient into the student states.
MhcaOutput mhca_forward(Var student, Var teacher, const MhcaWeights& w, const MhcaParams& shape,
                        bool detach_query = false);

FeatureBatch mhca_forward(const FeatureBatch& student, const FeatureBatch& teacher,
                          const MhcaParams& params);

// Contribution of one sample to (1 / (B L_s)) sum_b sum_i ||H_s - H_hat||^2.
Var mhca_sample_loss(Var student, Var aligned, std::size_t batch);
Var mhca_loss(std::span<const Var> student, std::span<const Var> aligned);
double mhca_loss(const FeatureBatch& student, const FeatureBatch& aligned);

struct EotCheckReport {
  double max_weight_deviation = 0.0;
  double max_projection_deviation = 0.0;
  double epsilon_used = 0.0;
};

// Compares softmax attention weights against the entropic conditional plan
// with cost -Q K^T and epsilon = sqrt(d_k), and the attention output against
// the plan's barycentric projection of V.
EotCheckReport eot_equivalence_check(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace evl
