#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "evl/autodiff.hpp"
#include "evl/sinkhorn.hpp"

namespace evl {

struct DistillConfig {
  double alpha = 0.3;
  double lambda_m = 1.0;
  double lambda_r = 0.03;
  double lambda_ot = 0.1;
  double sinkhorn_epsilon = 0.1;
  int heads = 8;
  int sinkhorn_max_iter = 200;
  double sinkhorn_tol = 1e-6;
  // Stop gradients into the student states along the MHCA query path.
  bool detach_query_target = false;
  // Treat the MHCA output as a fixed target inside the relation loss.
  bool detach_relation_teacher = true;

  // Throws ContractError naming the first field out of bounds.
  void validate() const;
  SinkhornOptions sinkhorn() const { return {sinkhorn_epsilon, sinkhorn_max_iter, sinkhorn_tol}; }

  bool operator==(const DistillConfig&) const = default;
};

DistillConfig default_config();

// Rejects unknown keys; missing keys keep their defaults.
DistillConfig distill_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DistillConfig& cfg);

// Candidate values for the weight search; exposed, not swept by default.
struct SearchGrid {
  std::vector<double> alpha{0.1, 0.3, 0.5, 0.7, 1.0};
  std::vector<double> lambda_m{0.1, 0.3, 0.5, 0.7, 1.0};
  std::vector<double> lambda_r{0.01, 0.03, 0.05, 0.07};
  std::vector<double> lambda_ot{0.1, 0.3, 0.5};
  std::vector<int> heads{4, 8, 16};
};

struct LossBreakdown {
  double ce = 0.0;
  double ot = 0.0;
  double mhca = 0.0;
  double dist = 0.0;
  double angle = 0.0;
  double rel = 0.0;
  double total = 0.0;

  // (1 - alpha) ce + alpha (lambda_m mhca + lambda_r rel + lambda_ot ot)
  double recombine(const DistillConfig& cfg) const;
};

struct LossTerms {
  double ce = 0.0;
  double ot = 0.0;
  double mhca = 0.0;
  double dist = 0.0;
  double angle = 0.0;
  double rel = 0.0;
};

LossBreakdown total_loss(const LossTerms& terms, const DistillConfig& cfg);
// Convenience form; dist and angle are set equal to rel.
LossBreakdown total_loss(double ce, double mhca, double rel, double ot, const DistillConfig& cfg);

// Differentiable combination with the same operation order as recombine().
Var total_loss(Var ce, Var mhca, Var rel, Var ot, const DistillConfig& cfg);

// Baseline (alpha = 0), +L_ot, +L_ot+L_mhca, full.
std::vector<DistillConfig> ablation_masks();
// Same four rows with every other field taken from base.
std::vector<DistillConfig> ablation_masks(const DistillConfig& base);
std::vector<std::string> ablation_names();

}  // namespace evl
