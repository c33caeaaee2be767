// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "evl/errors.hpp"
#include "evl/metrics.hpp"
#include "evl/mhca.hpp"
#include "evl/objective.hpp"
#include "evl/pipeline.hpp"
#include "evl/relation.hpp"
#include "evl/sinkhorn.hpp"

using namespace evl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---- 1: attention equals the entropic conditional plan ----------------------

Outcome criterion_eot() {
  const auto t0 = Clock::now();
  double w = 0.0, p = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dim(1, 8);
    const std::size_t ls = dim(rng), lt = dim(rng), dk = dim(rng);
    const EotCheckReport r = eot_equivalence_check(normal_tensor({ls, dk}, 1.0, rng), normal_tensor({lt, dk}, 1.0, rng),
                                                   normal_tensor({lt, dk}, 1.0, rng));
    w = std::max(w, r.max_weight_deviation);
    p = std::max(p, r.max_projection_deviation);
  }
  const double secs = seconds_since(t0);
  return {w <= 1e-12 && p <= 1e-12 && secs < 1.0,
          fmt("max weight dev %.3g, max projection dev %.3g, %.3f s", w, p, secs)};
}

// ---- 2: Sinkhorn marginals and permutation optimum --------------------------

Outcome criterion_sinkhorn() {
  const auto t0 = Clock::now();
  double worst_violation = 0.0;
  int worst_iters = 0, instances = 0, converged = 0;
  std::vector<CostMatrix> slow;
  for (std::size_t m = 4; m <= 8; ++m)
    for (std::size_t n = 4; n <= 6; ++n)
      for (std::uint64_t rep = 0; rep < 5; ++rep) {
        std::mt19937_64 rng(1000 * m + 10 * n + rep);
        const TokenSet t = TokenSet::normalized(normal_tensor({m, 6}, 1.0, rng));
        const TokenSet s = TokenSet::normalized(normal_tensor({n, 6}, 1.0, rng));
        const TransportPlan p = sinkhorn(cost_matrix(t, s), 0.1, 200, 1e-6);
        // Recompute the violation from the plan itself.
        double v = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          double r = 0.0;
          for (std::size_t j = 0; j < n; ++j) r += p.values(i, j);
          v = std::max(v, std::abs(r - 1.0 / m));
        }
        for (std::size_t j = 0; j < n; ++j) {
          double c = 0.0;
          for (std::size_t i = 0; i < m; ++i) c += p.values(i, j);
          v = std::max(v, std::abs(c - 1.0 / n));
        }
        worst_violation = std::max({worst_violation, v, p.marginal_violation});
        worst_iters = std::max(worst_iters, p.iterations_used);
        ++instances;
        if (p.marginal_violation <= 1e-6) {
          ++converged;
        } else {
          slow.push_back(cost_matrix(t, s));
        }
      }
  double worst_ratio = 0.0;
  for (std::size_t n = 2; n <= 6; ++n)
    for (std::uint64_t rep = 0; rep < 5; ++rep) {
      std::mt19937_64 rng(7000 + 10 * n + rep);
      const TokenSet t = TokenSet::normalized(normal_tensor({n, 4}, 1.0, rng));
      const TokenSet s = TokenSet::normalized(normal_tensor({n, 4}, 1.0, rng));
      const Tensor c = cost_matrix(t, s).values;
      const TransportPlan p = sinkhorn(CostMatrix{c}, 1e-3, 5000, 1e-9);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      double best = INFINITY;
      do {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += c(i, perm[i]);
        best = std::min(best, acc / n);
      } while (std::next_permutation(perm.begin(), perm.end()));
      double cost = 0.0;
      for (std::size_t k = 0; k < c.size(); ++k) cost += p.values[k] * c[k];
      worst_ratio = std::max(worst_ratio, (cost - best) / std::max(best, 1e-12));
    }
  const double secs = seconds_since(t0);
  // Diagnostic only, outside the timed part: iterations the stragglers need.
  int needed = 0;
  for (const CostMatrix& c : slow) needed = std::max(needed, sinkhorn(c, 0.1, 1000000, 1e-6).iterations_used);
  std::string detail = fmt("%g of %g instances reach 1e-6 within 200 iterations, worst violation %.3g",
                           converged, instances, worst_violation);
  if (!slow.empty()) detail += fmt(" (slowest needs %g iterations)", needed);
  detail += fmt("; worst excess over permutation optimum %.3g%%, %.3f s", 100.0 * worst_ratio, secs);
  return {worst_violation <= 1e-6 && worst_iters <= 200 && worst_ratio <= 0.01 && secs < 5.0, detail};
}

// ---- 3: gradient fidelity ----------------------------------------------------

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  constexpr std::size_t B = 2, Ls = 3, Lt = 5, Ds = 8, Dt = 12;
  std::mt19937_64 rng(2024);
  const DistillConfig cfg = default_config();
  MhcaParams shape = MhcaParams::init(Ds, Dt, 2, 99);  // d_k = 4
  std::vector<Tensor> teacher_hidden, teacher_visual;
  for (std::size_t b = 0; b < B; ++b) {
    teacher_hidden.push_back(normal_tensor({Lt, Dt}, 1.0, rng));
    teacher_visual.push_back(normal_tensor({Lt, Dt}, 1.0, rng));
  }
  // Trainable leaves: student states per sample, MHCA matrices, OT projection.
  std::vector<Tensor> inputs;
  for (std::size_t b = 0; b < B; ++b) inputs.push_back(normal_tensor({Ls, Ds}, 1.0, rng));
  for (const Parameter* p : shape.parameters()) inputs.push_back(p->value);
  inputs.push_back(uniform_tensor({Dt, Ds}, -0.3, 0.3, rng));
  const std::size_t proj = B + 4;
  // The iteration count is pinned so every perturbed evaluation runs the same graph.
  const SinkhornOptions sk{cfg.sinkhorn_epsilon, 60, 1e-300};

  struct Parts {
    Var ot, mhca, dist, angle, rel, total;
  };
  auto build = [&](Tape& tape, std::span<const Var> x) {
    const MhcaWeights w{x[B], x[B + 1], x[B + 2], x[B + 3]};
    std::vector<Var> hs(x.begin(), x.begin() + B), aligned;
    Var ot = tape.constant(Tensor::scalar(0.0));
    for (std::size_t b = 0; b < B; ++b) {
      aligned.push_back(mhca_forward(hs[b], tape.constant(teacher_hidden[b]), w, shape).aligned);
      Var t = l2_normalize_rows(matmul(tape.constant(teacher_visual[b]), x[proj]), kNormFloor);
      Var s = l2_normalize_rows(hs[b], kNormFloor);
      ot = add(ot, scale(ot_loss(t, s, sk).loss, 1.0 / B));
    }
    const RelationTerms rel = relation_loss(aligned, hs, false);
    Var mhca = mhca_loss(hs, aligned);
    Var ce = tape.constant(Tensor::scalar(0.6));
    return Parts{ot, mhca, rel.dist, rel.angle, rel.rel, total_loss(ce, mhca, rel.rel, ot, cfg)};
  };
  const std::vector<std::pair<std::string, std::function<Var(const Parts&)>>> terms{
      {"ot", [](const Parts& p) { return p.ot; }},       {"mhca", [](const Parts& p) { return p.mhca; }},
      {"dist", [](const Parts& p) { return p.dist; }},   {"angle", [](const Parts& p) { return p.angle; }},
      {"rel", [](const Parts& p) { return p.rel; }},     {"total", [](const Parts& p) { return p.total; }}};
  double worst = 0.0;
  std::string worst_name, failed;
  // Full gradient flow: a stop-gradient on the relation teacher side is not a
  // derivative of the computed value, so it has nothing to match.
  for (const auto& [name, pick] : terms) {
    const CheckReport r = finite_diff_check(
        [&](Tape& tape, std::span<const Var> x) { return pick(build(tape, x)); }, inputs, 1e-5, 1e-4);
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = name;
    }
    if (!r.passed) failed += " " + name;
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < 30.0,
          "max relative error " + fmt("%.3g", worst) + " (" + worst_name + ")" +
              (failed.empty() ? "" : ", failed:" + failed) + fmt(", %.2f s", secs)};
}

// ---- 4: objective identities -------------------------------------------------

Outcome criterion_formula() {
  const DistillConfig d = default_config();
  const bool unit = total_loss(1.0, 1.0, 1.0, 1.0, d).total == 1.039;
  DistillConfig zero = d;
  zero.alpha = 0.0;
  bool ce_only = true;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int k = 0; k < 100; ++k) {
    const double ce = u(rng);
    ce_only = ce_only && total_loss(ce, u(rng), u(rng), u(rng), zero).total == ce;
  }
  // Slopes: unit step from zero components, then the autodiff gradient at a generic point.
  const double base = total_loss(0.0, 0.0, 0.0, 0.0, d).total;
  bool slopes = total_loss(0.0, 0.0, 0.0, 1.0, d).total - base == d.alpha * d.lambda_ot &&
                total_loss(0.0, 1.0, 0.0, 0.0, d).total - base == d.alpha * d.lambda_m &&
                total_loss(0.0, 0.0, 1.0, 0.0, d).total - base == d.alpha * d.lambda_r;
  Tape tape;
  Var ce = tape.leaf(Tensor::scalar(0.37)), m = tape.leaf(Tensor::scalar(2.9)), r = tape.leaf(Tensor::scalar(0.21)),
      ot = tape.leaf(Tensor::scalar(1.3));
  tape.backward(total_loss(ce, m, r, ot, d));
  slopes = slopes && tape.grad(ot).item() == d.alpha * d.lambda_ot && tape.grad(m).item() == d.alpha * d.lambda_m &&
           tape.grad(r).item() == d.alpha * d.lambda_r;
  return {unit && ce_only && slopes, fmt("default total on unit components %.17g", total_loss(1.0, 1.0, 1.0, 1.0, d).total) +
                                         "; alpha=0 collapse " + (ce_only ? "ok" : "broken") + "; slopes " +
                                         (slopes ? "exact" : "inexact")};
}

// ---- 5: potential invariances ------------------------------------------------

Outcome criterion_invariances() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 rng(500 + s);
    std::uniform_real_distribution<double> pos(0.05, 20.0);
    const std::size_t l = 2 + s % 7, d = 2 + s % 5;
    const Tensor h = normal_tensor({l, d}, 1.0, rng);
    Tensor scaled = h, row_scaled = h;
    const double c = pos(rng);
    for (double& v : scaled.data()) v *= c;
    for (std::size_t i = 0; i < l; ++i) {
      const double r = pos(rng);
      for (double& v : row_scaled.row(i)) v *= r;
    }
    // Random orthogonal matrix by Gram-Schmidt.
    Tensor q = normal_tensor({d, d}, 1.0, rng);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += q(i, k) * q(j, k);
        for (std::size_t k = 0; k < d; ++k) q(i, k) -= dot * q(j, k);
      }
      double n = 0.0;
      for (std::size_t k = 0; k < d; ++k) n += q(i, k) * q(i, k);
      for (std::size_t k = 0; k < d; ++k) q(i, k) /= std::sqrt(n);
    }
    const Tensor rotated = matmul(h, q);
    const Tensor pd = distance_potential(h).values, pa = angle_potential(h).values;
    worst = std::max({worst, max_abs_diff(pd, distance_potential(scaled).values),
                      max_abs_diff(pa, angle_potential(row_scaled).values),
                      max_abs_diff(pd, distance_potential(rotated).values),
                      max_abs_diff(pa, angle_potential(rotated).values)});
  }
  return {worst <= 1e-9, fmt("worst deviation %.3g over 50 instances", worst)};
}

// ---- 6: ablation direction ---------------------------------------------------

Outcome criterion_ablation() {
  const auto t0 = Clock::now();
  const ExperimentConfig cfg = default_experiment();
  const ExperimentData data = build_data(cfg, 1);
  const AblationResult r = run_ablation(cfg, data, 7);
  const double secs = seconds_since(t0);
  std::printf("  teacher macro AUC %.4f, SFT macro AUC %.4f\n", r.teacher_eval.macro_auc, r.sft_eval.macro_auc);
  for (const AblationSummary& s : r.summary)
    std::printf("  %-14s macro AUC %.4f +- %.4f  F1 %.4f  Hamming %.4f  (%zu runs)\n", s.config.c_str(), s.auc_mean,
                s.auc_std, s.f1_mean, s.hamming_mean, s.runs);
  const bool gate = r.full_gain >= 0.005 && secs <= 1800.0;
  return {gate, fmt("full - baseline = %+.4f AUC (gate +0.005), %.0f s, monotone chain ", r.full_gain, secs) +
                    (r.monotone ? "holds" : "broken")};
}

// ---- 7: determinism and persistence ------------------------------------------

Outcome criterion_determinism() {
  ExperimentConfig c = default_experiment();
  c.data.generator.n_leads = 3;
  c.data.generator.n_samples = 400;
  c.data.records = 30;
  c.data.teacher_extra_records = 10;
  c.teacher.tokenizer = {20, 20, 16, 11};
  c.teacher.width = 16;
  c.teacher.blocks = 1;
  c.teacher.heads = 2;
  c.teacher.pool = 2;
  c.student.tokenizer = {40, 40, 16, 12};
  c.student.width = 8;
  c.student.blocks = 1;
  c.student.heads = 2;
  c.student.pool = 2;
  c.train.batch_size = 4;
  const ExperimentData d1 = build_data(c, 1), d2 = build_data(c, 1);
  bool data_same = d1.split.train.size() == d2.split.train.size();
  for (std::size_t i = 0; data_same && i < d1.split.train.size(); ++i)
    data_same = d1.split.train.records[i].signal == d2.split.train.records[i].signal;

  const TrainResult t1 = train_teacher(c, d1, 8, 7), t2 = train_teacher(c, d2, 8, 7);
  const TrainResult s1 = sft_student(c, d1, 6, 7), s2 = sft_student(c, d2, 6, 7);
  const std::string teacher_before = serialize(t1.checkpoint);
  const TrainResult k1 = distill_student(c, c.distill, s1.checkpoint, t1.checkpoint, d1, 5, 3);
  const TrainResult k2 = distill_student(c, c.distill, s2.checkpoint, t2.checkpoint, d2, 5, 3);
  const bool runs_same = serialize(t1.checkpoint) == serialize(t2.checkpoint) &&
                         serialize(s1.checkpoint) == serialize(s2.checkpoint) &&
                         serialize(k1.checkpoint) == serialize(k2.checkpoint) &&
                         to_json(k1.eval) == to_json(k2.eval);
  bool logs_same = k1.log.size() == k2.log.size();
  for (std::size_t i = 0; logs_same && i < k1.log.size(); ++i)
    logs_same = k1.log[i].total == k2.log[i].total && k1.log[i].ot == k2.log[i].ot;
  const std::string bytes = serialize(k1.checkpoint);
  const bool round_trip = serialize(deserialize(bytes)) == bytes;
  const bool frozen = serialize(t1.checkpoint) == teacher_before;
  // Threaded training must stay within 1e-10 of the single-threaded reference.
  RunOptions threaded;
  threaded.threads = 3;
  const TrainResult k3 = distill_student(c, c.distill, s1.checkpoint, t1.checkpoint, d1, 5, 3, threaded);
  double thread_dev = 0.0;
  for (std::size_t i = 0; i < k1.checkpoint.params.items().size(); ++i)
    thread_dev = std::max(thread_dev, max_abs_diff(k1.checkpoint.params.items()[i].value,
                                                   k3.checkpoint.params.items()[i].value));
  const bool pass = data_same && runs_same && logs_same && round_trip && frozen && thread_dev <= 1e-10;
  return {pass, std::string("data ") + (data_same ? "same" : "differs") + ", checkpoints/metrics " +
                    (runs_same && logs_same ? "bitwise equal" : "differ") + ", round trip " +
                    (round_trip ? "byte-identical" : "differs") + ", teacher " + (frozen ? "unchanged" : "changed") +
                    fmt(", threaded deviation %.3g", thread_dev)};
}

// ---- 8: metric oracles -------------------------------------------------------

Outcome criterion_metrics() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 rng(800 + s);
    std::uniform_int_distribution<int> bit(0, 1), level(0, 9);
    const std::size_t n = 10 + s % 30, k = 1 + s % 5;
    Tensor scores({n, k});
    std::vector<std::vector<int>> labels(n, std::vector<int>(k));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        scores(i, c) = s % 2 ? level(rng) / 9.0 : std::uniform_real_distribution<double>(0, 1)(rng);
        labels[i][c] = bit(rng);
      }
    std::fill(labels[0].begin(), labels[0].end(), 1);
    std::fill(labels[1].begin(), labels[1].end(), 0);
    double oracle = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double credit = 0.0, pairs = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (labels[i][c] == 1 && labels[j][c] == 0) {
            pairs += 1.0;
            credit += scores(i, c) > scores(j, c) ? 1.0 : scores(i, c) == scores(j, c) ? 0.5 : 0.0;
          }
      oracle += credit / pairs / static_cast<double>(k);
    }
    std::vector<std::string> names(k, "c");
    worst = std::max(worst, std::abs(compute_metrics(scores, labels, names).macro_auc - oracle));
  }

  struct Fixture {
    Tensor scores;
    std::vector<std::vector<int>> labels;
    double hamming, f1;
  };
  // Hand-computed at threshold 0.5 (score >= 0.5 predicts positive).
  const std::vector<Fixture> fixtures{
      // a: tp1 fp1 fn1 -> 0.5; b: tp2 -> 1. Two wrong bits of eight.
      {Tensor::matrix({{0.9, 0.8}, {0.6, 0.1}, {0.2, 0.7}, {0.4, 0.3}}), {{1, 1}, {0, 0}, {1, 1}, {0, 0}}, 0.25, 0.75},
      // Constant 0.5 on balanced labels: all predicted positive, F1 2/3 per class.
      {Tensor({4, 2}, 0.5), {{1, 0}, {0, 1}, {1, 1}, {0, 0}}, 0.5, 2.0 / 3.0},
      // Three classes: a tp1 fp0 fn1 -> 2/3; b tp0 fp1 fn0 -> 0; c tp2 -> 1. Wrong bits: a row 1, b row 1, so two of nine.
      {Tensor::matrix({{0.7, 0.2, 0.9}, {0.1, 0.6, 0.8}, {0.3, 0.4, 0.2}}), {{1, 0, 1}, {1, 0, 1}, {0, 0, 0}},
       2.0 / 9.0, (2.0 / 3.0 + 0.0 + 1.0) / 3.0},
  };
  double fixture_err = 0.0;
  for (const Fixture& f : fixtures) {
    const MetricsReport r = compute_metrics(f.scores, f.labels, std::vector<std::string>(f.scores.cols(), "c"));
    fixture_err = std::max({fixture_err, std::abs(r.hamming_loss - f.hamming), std::abs(r.macro_f1 - f.f1)});
  }
  return {worst <= 1e-12 && fixture_err <= 1e-15,
          fmt("max AUC deviation from pairwise oracle %.3g over 50 sets, fixture error %.3g", worst, fixture_err)};
}

}  // namespace

// Optional arguments pick criteria by number; none runs all eight.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"attention equals entropic plan", criterion_eot},
      {"sinkhorn marginals and optimum", criterion_sinkhorn},
      {"gradient fidelity", criterion_gradients},
      {"objective identities", criterion_formula},
      {"potential invariances", criterion_invariances},
      {"ablation direction", criterion_ablation},
      {"determinism and persistence", criterion_determinism},
      {"metric oracles", criterion_metrics},
  };
  std::vector<bool> selected(criteria.size(), argc < 2);
  for (int a = 1; a < argc; ++a) {
    const int k = std::atoi(argv[a]);
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "no criterion %s\n", argv[a]);
      return 2;
    }
    selected[static_cast<std::size_t>(k - 1)] = true;
  }
  int failures = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    ++ran;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %zu [%s]: %s - %s\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
