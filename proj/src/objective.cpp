#include "evl/objective.hpp"

#include <cmath>

#include "evl/errors.hpp"

namespace evl {

void DistillConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& bound) {
    throw ContractError("DistillConfig." + field + " must be " + bound);
  };
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha", "in [0, 1]");
  if (!(lambda_m >= 0.0) || !std::isfinite(lambda_m)) fail("lambda_m", "finite and >= 0");
  if (!(lambda_r >= 0.0) || !std::isfinite(lambda_r)) fail("lambda_r", "finite and >= 0");
  if (!(lambda_ot >= 0.0) || !std::isfinite(lambda_ot)) fail("lambda_ot", "finite and >= 0");
  if (!(sinkhorn_epsilon > 0.0) || !std::isfinite(sinkhorn_epsilon)) fail("sinkhorn_epsilon", "> 0");
  if (heads < 1) fail("heads", ">= 1");
  if (sinkhorn_max_iter < 1) fail("sinkhorn_max_iter", ">= 1");
  if (!(sinkhorn_tol > 0.0)) fail("sinkhorn_tol", "> 0");
}

DistillConfig default_config() { return DistillConfig{}; }

DistillConfig distill_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("distill config must be a JSON object");
  DistillConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "lambda_m") c.lambda_m = value.get<double>();
      else if (key == "lambda_r") c.lambda_r = value.get<double>();
      else if (key == "lambda_ot") c.lambda_ot = value.get<double>();
      else if (key == "sinkhorn_epsilon") c.sinkhorn_epsilon = value.get<double>();
      else if (key == "heads") c.heads = value.get<int>();
      else if (key == "sinkhorn_max_iter") c.sinkhorn_max_iter = value.get<int>();
      else if (key == "sinkhorn_tol") c.sinkhorn_tol = value.get<double>();
      else if (key == "detach_query_target") c.detach_query_target = value.get<bool>();
      else if (key == "detach_relation_teacher") c.detach_relation_teacher = value.get<bool>();
      else throw InputError("unknown distill config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("bad value for distill config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const DistillConfig& c) {
  return {{"alpha", c.alpha},
          {"lambda_m", c.lambda_m},
          {"lambda_r", c.lambda_r},
          {"lambda_ot", c.lambda_ot},
          {"sinkhorn_epsilon", c.sinkhorn_epsilon},
          {"heads", c.heads},
          {"sinkhorn_max_iter", c.sinkhorn_max_iter},
          {"sinkhorn_tol", c.sinkhorn_tol},
          {"detach_query_target", c.detach_query_target},
          {"detach_relation_teacher", c.detach_relation_teacher}};
}

double LossBreakdown::recombine(const DistillConfig& cfg) const {
  return (1.0 - cfg.alpha) * ce +
         cfg.alpha * (cfg.lambda_m * mhca + cfg.lambda_r * rel + cfg.lambda_ot * ot);
}

LossBreakdown total_loss(const LossTerms& t, const DistillConfig& cfg) {
  const std::pair<const char*, double> named[] = {{"ce", t.ce},       {"ot", t.ot},
                                                  {"mhca", t.mhca},   {"dist", t.dist},
                                                  {"angle", t.angle}, {"rel", t.rel}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw ContractError(std::string("non-finite loss component ") + name);
  }
  LossBreakdown b{t.ce, t.ot, t.mhca, t.dist, t.angle, t.rel, 0.0};
  b.total = b.recombine(cfg);
  return b;
}

LossBreakdown total_loss(double ce, double mhca, double rel, double ot, const DistillConfig& cfg) {
  return total_loss(LossTerms{ce, ot, mhca, rel, rel, rel}, cfg);
}

Var total_loss(Var ce, Var mhca, Var rel, Var ot, const DistillConfig& cfg) {
  Var kd = add(add(scale(mhca, cfg.lambda_m), scale(rel, cfg.lambda_r)), scale(ot, cfg.lambda_ot));
  return add(scale(ce, 1.0 - cfg.alpha), scale(kd, cfg.alpha));
}

std::vector<DistillConfig> ablation_masks(const DistillConfig& base) {
  DistillConfig baseline = base;
  baseline.alpha = 0.0;
  DistillConfig ot_only = base;
  ot_only.lambda_m = 0.0;
  ot_only.lambda_r = 0.0;
  DistillConfig ot_mhca = base;
  ot_mhca.lambda_r = 0.0;
  return {baseline, ot_only, ot_mhca, base};
}

std::vector<DistillConfig> ablation_masks() { return ablation_masks(default_config()); }

std::vector<std::string> ablation_names() { return {"baseline", "ot", "ot+mhca", "full"}; }

}  // namespace evl
