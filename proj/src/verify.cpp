#include "evl/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "evl/ecg.hpp"
#include "evl/errors.hpp"
#include "evl/metrics.hpp"
#include "evl/mhca.hpp"
#include "evl/model.hpp"
#include "evl/objective.hpp"
#include "evl/relation.hpp"
#include "evl/sinkhorn.hpp"
#include "evl/util.hpp"

namespace evl {

namespace {

std::string num(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

VerifyResult eot_check(std::uint64_t seed) {
  double w = 0.0, p = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 rng(sub_seed(seed, s));
    const Tensor q = normal_tensor({4, 6}, 1.0, rng);
    const Tensor k = normal_tensor({7, 6}, 1.0, rng);
    const Tensor v = normal_tensor({7, 5}, 1.0, rng);
    const EotCheckReport r = eot_equivalence_check(q, k, v);
    w = std::max(w, r.max_weight_deviation);
    p = std::max(p, r.max_projection_deviation);
  }
  return {"attention_equals_entropic_plan", w <= 1e-12 && p <= 1e-12,
          "weights " + num(w) + ", projection " + num(p)};
}

VerifyResult sinkhorn_check(std::uint64_t seed) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(sub_seed(seed, 100 + s));
    const std::size_t m = 4 + s % 5, n = 4 + (s / 5) % 3;
    const TransportPlan p = sinkhorn(CostMatrix{uniform_tensor({m, n}, 0.0, 1.0, rng)}, 0.1, 200, 1e-6);
    worst = std::max(worst, p.marginal_violation);
  }
  return {"sinkhorn_marginals", worst <= 1e-6, "worst violation " + num(worst)};
}

VerifyResult gradient_check(std::uint64_t seed) {
  const std::size_t batch = 2, ls = 3, lt = 5, ds = 8, dt = 12;
  std::mt19937_64 rng(sub_seed(seed, 200));
  MhcaParams shape = MhcaParams::init(ds, dt, 2, sub_seed(seed, 201));
  std::vector<Tensor> inputs;
  for (std::size_t b = 0; b < batch; ++b) inputs.push_back(normal_tensor({ls, ds}, 1.0, rng));
  for (std::size_t b = 0; b < batch; ++b) inputs.push_back(normal_tensor({lt, dt}, 1.0, rng));
  for (Parameter* p : shape.parameters()) inputs.push_back(p->value);
  const SinkhornOptions sk{0.5, 40, 1e-300};
  DistillConfig cfg;

  auto total = [&](Tape& t, std::span<const Var> x) {
    std::vector<Var> hs(x.begin(), x.begin() + batch), aligned;
    MhcaWeights w{x[2 * batch], x[2 * batch + 1], x[2 * batch + 2], x[2 * batch + 3]};
    Var ot = t.constant(Tensor::scalar(0.0));
    for (std::size_t b = 0; b < batch; ++b) {
      aligned.push_back(mhca_forward(hs[b], x[batch + b], w, shape).aligned);
      Var tt = l2_normalize_rows(slice_cols(x[batch + b], 0, ds), kNormFloor);
      Var ss = l2_normalize_rows(hs[b], kNormFloor);
      ot = add(ot, scale(ot_loss(tt, ss, sk).loss, 1.0 / batch));
    }
    RelationTerms rel = relation_loss(aligned, hs, false);
    return total_loss(t.constant(Tensor::scalar(0.7)), mhca_loss(hs, aligned), rel.rel, ot, cfg);
  };
  const CheckReport r = finite_diff_check(total, inputs, 1e-5, 1e-4);
  return {"total_loss_gradients", r.passed, "max relative error " + num(r.max_relative_error)};
}

VerifyResult formula_check() {
  const LossBreakdown b = total_loss(1.0, 1.0, 1.0, 1.0, default_config());
  DistillConfig zero = default_config();
  zero.alpha = 0.0;
  const bool ce_only = total_loss(0.42, 9.0, 9.0, 9.0, zero).total == 0.42;
  const DistillConfig d = default_config();
  // Unit step from zero keeps every product exact.
  const double slope = total_loss(0.0, 0.0, 0.0, 1.0, d).total - total_loss(0.0, 0.0, 0.0, 0.0, d).total;
  Tape tape;
  Var ot = tape.leaf(Tensor::scalar(0.5));
  auto c = [&](double v) { return tape.constant(Tensor::scalar(v)); };
  tape.backward(total_loss(c(1.0), c(1.0), c(1.0), ot, d));
  const bool grad_ok = tape.grad(ot).item() == d.alpha * d.lambda_ot;
  return {"objective_identities", b.total == 1.039 && ce_only && slope == d.alpha * d.lambda_ot && grad_ok,
          "default total " + num(b.total)};
}

VerifyResult potential_check(std::uint64_t seed) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 rng(sub_seed(seed, 300 + s));
    const Tensor h = normal_tensor({6, 4}, 1.0, rng);
    Tensor scaled = h, row_scaled = h;
    for (double& v : scaled.data()) v *= 3.7;
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (double& v : row_scaled.row(i)) v *= 0.5 + static_cast<double>(i);
    worst = std::max(worst, max_abs_diff(distance_potential(h).values, distance_potential(scaled).values));
    worst = std::max(worst, max_abs_diff(angle_potential(h).values, angle_potential(row_scaled).values));
  }
  return {"potential_invariances", worst <= 1e-9, "worst deviation " + num(worst)};
}

VerifyResult metric_check(std::uint64_t seed) {
  std::mt19937_64 rng(sub_seed(seed, 400));
  std::uniform_int_distribution<int> bit(0, 1);
  std::uniform_int_distribution<int> level(0, 4);
  double worst = 0.0;
  bool bounds = true;
  for (int s = 0; s < 20; ++s) {
    const std::size_t n = 30;
    Tensor scores({n, 3});
    std::vector<std::vector<int>> labels(n, std::vector<int>(3));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        scores(i, c) = level(rng) / 4.0;
        labels[i][c] = bit(rng);
      }
    labels[0] = {1, 1, 1};
    labels[1] = {0, 0, 0};
    const MetricsReport r = compute_metrics(scores, labels, {"a", "b", "c"});
    double pairwise = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      double credit = 0.0, pairs = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (labels[i][c] && !labels[j][c]) {
            pairs += 1.0;
            credit += scores(i, c) > scores(j, c) ? 1.0 : (scores(i, c) == scores(j, c) ? 0.5 : 0.0);
          }
      pairwise += credit / pairs / 3.0;
    }
    worst = std::max(worst, std::abs(pairwise - r.macro_auc));
    bounds = bounds && r.macro_auc >= 0 && r.macro_auc <= 1 && r.macro_f1 >= 0 && r.macro_f1 <= 1 &&
             r.hamming_loss >= 0 && r.hamming_loss <= 1;
  }
  return {"metric_oracles", worst <= 1e-12 && bounds, "auc deviation " + num(worst)};
}

VerifyResult persistence_check(std::uint64_t seed) {
  EncoderConfig enc;
  enc.tokenizer = {100, 100, 16, 3};
  enc.width = 16;
  enc.blocks = 1;
  enc.heads = 2;
  enc.pool = 2;
  Checkpoint c;
  c.params = init_encoder(enc, 2, 400, seed);
  c.config_hash = model_hash(enc, 2, 400);
  c.step = 12;
  c.metrics = {{"macro_auc", 0.75}};
  const std::string once = serialize(c);
  const bool same = serialize(deserialize(once)) == once;
  bool rejected = false;
  try {
    Checkpoint bad = deserialize(once);
    bad.config_hash ^= 1;
    (void)deserialize(serialize(bad));
    rejected = bad.config_hash != c.config_hash;
  } catch (const Error&) {
  }
  GeneratorConfig g;
  const bool det = generate_record(seed, g, {1, 0, 1, 0, 1}).signal.storage() ==
                   generate_record(seed, g, {1, 0, 1, 0, 1}).signal.storage();
  return {"persistence_and_determinism", same && rejected && det, "round trip " + std::string(same ? "ok" : "differs")};
}

VerifyResult generator_check(std::uint64_t seed) {
  GeneratorConfig g;
  const EcgRecord base = generate_record(seed, g, {0, 0, 0, 0, 0});
  const EcgRecord st = generate_record(seed, g, {1, 0, 0, 0, 0});
  const BeatTemplate tpl;
  // Regular rhythm: the beat before the first listed one sits one RR earlier.
  std::vector<double> onsets = base.beat_onsets;
  if (onsets.size() > 1) onsets.insert(onsets.begin(), 2.0 * onsets[0] - onsets[1]);
  double outside = 0.0;
  std::size_t n_out = 0;
  for (std::size_t s = 0; s < g.n_samples; ++s) {
    const double t = static_cast<double>(s) / g.sample_rate;
    const bool inside = std::any_of(onsets.begin(), onsets.end(), [&](double o) {
      return t - o >= tpl.qrs_end() && t - o < tpl.t_onset();
    });
    if (inside) continue;
    for (std::size_t l = 0; l < g.n_leads; ++l) {
      outside += std::abs(base.signal(l, s) - st.signal(l, s));
      ++n_out;
    }
  }
  const double mean = n_out ? outside / static_cast<double>(n_out) : 0.0;
  return {"st_shift_confined_to_st_window", mean <= g.noise_fraction, "mean outside difference " + num(mean)};
}

}  // namespace

std::vector<VerifyResult> run_verify_suite(std::uint64_t seed, int threads) {
  std::vector<std::function<VerifyResult()>> checks{
      [&] { return eot_check(seed); },       [&] { return sinkhorn_check(seed); },
      [&] { return gradient_check(seed); },  [] { return formula_check(); },
      [&] { return potential_check(seed); }, [&] { return metric_check(seed); },
      [&] { return persistence_check(seed); }, [&] { return generator_check(seed); }};
  std::vector<VerifyResult> out(checks.size());
  parallel_for(checks.size(), threads, [&](std::size_t i) {
    try {
      out[i] = checks[i]();
    } catch (const std::exception& e) {
      out[i] = {"check_" + std::to_string(i), false, e.what()};
    }
  });
  return out;
}

}  // namespace evl
