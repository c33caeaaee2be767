#pragma once

#include <filesystem>

#include "evl/autodiff.hpp"
#include "evl/tensor.hpp"

namespace evl {

inline constexpr double kNormFloor = 1e-12;

// V x D tokens with unit-norm rows (or exact zero rows kept by the norm floor).
struct TokenSet {
  Tensor tokens;

  std::size_t count() const { return tokens.rows(); }
  std::size_t width() const { return tokens.cols(); }

  // L2-normalizes the rows of raw.
  static TokenSet normalized(const Tensor& raw, double floor = kNormFloor);
};

struct CostMatrix {
  Tensor values;  // V_t x V_s squared Euclidean distances
};

struct TransportPlan {
  Tensor values;  // V_t x V_s coupling
  double epsilon = 0.0;
  int iterations_used = 0;
  // L1 distance of the row sums to 1/V_t plus that of the column sums to 1/V_s.
  double marginal_violation = 0.0;
};

struct SinkhornOptions {
  double epsilon = 0.1;
  int max_iter = 200;
  double tol = 1e-6;
};

CostMatrix cost_matrix(const TokenSet& teacher, const TokenSet& student);

// Log-domain Sinkhorn with uniform marginals. Stops once the marginal
// violation is at most tol; running out of iterations is reported in the
// plan, not thrown.
TransportPlan sinkhorn(const CostMatrix& cost, double epsilon, int max_iter, double tol);
inline TransportPlan sinkhorn(const CostMatrix& cost, const SinkhornOptions& opt = {}) {
  return sinkhorn(cost, opt.epsilon, opt.max_iter, opt.tol);
}

// sum_ij P_ij ||t_i - s_j||^2 for a given plan.
double ot_loss(const TokenSet& teacher, const TokenSet& student, const TransportPlan& plan);

// Entropy -sum P log P of the plan (0 log 0 = 0).
double plan_entropy(const TransportPlan& plan);

// Differentiable transport plan. Gradients flow through every executed
// iteration; the iteration count is fixed by the forward pass.
Var sinkhorn_plan(Var cost, const SinkhornOptions& opt);

struct OtTerms {
  Var loss;
  Var plan;
};

// L_ot between unit-norm token rows; the plan is solved inside the graph.
OtTerms ot_loss(Var teacher_tokens, Var student_tokens, const SinkhornOptions& opt);

// CSV: header line of student indices, then one line per teacher token.
void export_plan(const TransportPlan& plan, const std::filesystem::path& path);
Tensor read_plan_csv(const std::filesystem::path& path);

// Shortest decimal text that parses back to exactly v, with a ".0" suffix
// for integral values.
std::string format_real(double v);

}  // namespace evl
