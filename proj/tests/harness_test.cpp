#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "evl/errors.hpp"
#include "evl/metrics.hpp"
#include "evl/pipeline.hpp"
#include "evl/sinkhorn.hpp"
#include "evl/util.hpp"

using namespace evl;
namespace fs = std::filesystem;

namespace {

// Two leads, short signals, narrow encoders: every training path in seconds.
ExperimentConfig tiny_experiment() {
  ExperimentConfig c = default_experiment();
  c.data.generator.n_leads = 2;
  c.data.generator.n_samples = 400;
  c.data.records = 24;
  c.data.teacher_extra_records = 8;
  c.teacher.tokenizer = {20, 20, 16, 11};
  c.teacher.width = 16;
  c.teacher.blocks = 1;
  c.teacher.heads = 2;
  c.teacher.pool = 2;
  c.student.tokenizer = {40, 40, 12, 12};
  c.student.width = 8;
  c.student.blocks = 1;
  c.student.heads = 2;
  c.student.pool = 2;
  c.distill.heads = 4;
  c.train.batch_size = 4;
  c.train.teacher_steps = 6;
  c.train.sft_steps = 4;
  c.train.distill_steps = 4;
  c.train.ablation_seeds = {1, 2};
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("evl_harness_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Trained {
  ExperimentConfig cfg = tiny_experiment();
  ExperimentData data = build_data(cfg, 1);
  TrainResult teacher = train_teacher(cfg, data, cfg.train.teacher_steps, 7);
  TrainResult sft = sft_student(cfg, data, cfg.train.sft_steps, 7);
};

const Trained& trained() {
  static const Trained t;
  return t;
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double credit = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        credit += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return credit / pairs;
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(EVL_CLI_PATH) + " " + args + " 2>/dev/null";
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace

// ---- metrics ---------------------------------------------------------------

TEST(Metrics, PerfectPredictor) {
  const Tensor s = Tensor::matrix({{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.6}, {0.1, 0.3}});
  const std::vector<std::vector<int>> y{{1, 0}, {0, 1}, {1, 1}, {0, 0}};
  const MetricsReport r = compute_metrics(s, y, {"a", "b"});
  EXPECT_EQ(r.macro_auc, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_EQ(r.hamming_loss, 0.0);
}

TEST(Metrics, ConstantHalfOnBalancedLabels) {
  // Scores at the threshold count as positive predictions.
  const Tensor s({4, 2}, 0.5);
  const std::vector<std::vector<int>> y{{1, 0}, {0, 1}, {1, 1}, {0, 0}};
  const MetricsReport r = compute_metrics(s, y, {"a", "b"});
  EXPECT_EQ(r.macro_auc, 0.5);
  EXPECT_EQ(r.hamming_loss, 0.5);
  EXPECT_NEAR(r.macro_f1, 2.0 / 3.0, 1e-15);
}

TEST(Metrics, HandFixtures) {
  {
    // Class a: tp 1, fp 1, fn 1 -> F1 0.5. Class b: tp 2, fp 0, fn 0 -> 1. 2 wrong bits of 8.
    const Tensor s = Tensor::matrix({{0.9, 0.8}, {0.6, 0.1}, {0.2, 0.7}, {0.4, 0.3}});
    const std::vector<std::vector<int>> y{{1, 1}, {0, 0}, {1, 1}, {0, 0}};
    const MetricsReport r = compute_metrics(s, y, {"a", "b"});
    EXPECT_NEAR(r.per_class[0].f1, 0.5, 1e-15);
    EXPECT_EQ(r.per_class[1].f1, 1.0);
    EXPECT_NEAR(r.macro_f1, 0.75, 1e-15);
    EXPECT_EQ(r.hamming_loss, 0.25);
  }
  {
    // Everything wrong.
    const Tensor s = Tensor::matrix({{0.1, 0.9, 0.2}, {0.8, 0.3, 0.6}});
    const std::vector<std::vector<int>> y{{1, 0, 1}, {0, 1, 0}};
    const MetricsReport r = compute_metrics(s, y, {"a", "b", "c"});
    EXPECT_EQ(r.macro_f1, 0.0);
    EXPECT_EQ(r.hamming_loss, 1.0);
    EXPECT_EQ(r.macro_auc, 0.0);
  }
  {
    // Class b has no positives: excluded from the AUC mean and flagged;
    // its F1 is 1 when nothing is predicted. One wrong bit (row 2, class a) of 6.
    const Tensor s = Tensor::matrix({{0.8, 0.1}, {0.3, 0.2}, {0.6, 0.4}});
    const std::vector<std::vector<int>> y{{1, 0}, {0, 0}, {0, 0}};
    const MetricsReport r = compute_metrics(s, y, {"a", "b"});
    EXPECT_EQ(r.flagged, std::vector<std::string>{"b"});
    EXPECT_FALSE(r.per_class[1].auc_defined);
    EXPECT_EQ(r.macro_auc, 1.0);
    EXPECT_NEAR(r.per_class[0].f1, 2.0 / 3.0, 1e-15);
    EXPECT_EQ(r.per_class[1].f1, 1.0);
    EXPECT_NEAR(r.hamming_loss, 1.0 / 6.0, 1e-15);
  }
}

TEST(Metrics, AucMatchesPairwiseOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> bit(0, 1), level(0, 6);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 20, k = 3;
    Tensor s({n, k});
    std::vector<std::vector<int>> y(n, std::vector<int>(k));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        s(i, c) = rep % 2 ? level(rng) / 6.0 : std::uniform_real_distribution<double>(0, 1)(rng);
        y[i][c] = bit(rng);
      }
    y[0] = {1, 1, 1};
    y[1] = {0, 0, 0};
    double oracle = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> col(n);
      std::vector<int> lab(n);
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = s(i, c);
        lab[i] = y[i][c];
      }
      oracle += pairwise_auc(col, lab) / k;
    }
    const MetricsReport r = compute_metrics(s, y, {"a", "b", "c"});
    EXPECT_NEAR(r.macro_auc, oracle, 1e-12);
    EXPECT_GE(r.hamming_loss, 0.0);
    EXPECT_LE(r.hamming_loss, 1.0);
    EXPECT_GE(r.macro_f1, 0.0);
    EXPECT_LE(r.macro_f1, 1.0);
  }
}

TEST(Metrics, NoDefinedClassRejected) {
  EXPECT_THROW(compute_metrics(Tensor({2, 1}, 0.5), {{1}, {1}}, {"a"}), InputError);
}

// ---- singular values -------------------------------------------------------

TEST(Svd, RankOne) {
  std::mt19937_64 rng(1);
  const Tensor u = normal_tensor({9, 1}, 1.0, rng), v = normal_tensor({1, 5}, 1.0, rng);
  const auto s = singular_values(matmul(u, v));
  ASSERT_EQ(s.size(), 5u);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LE(s[i], 1e-8 * s[0]);
}

TEST(Svd, OrthonormalRowsAreFlat) {
  const auto s = singular_values(Tensor::matrix({{0.6, 0.8, 0}, {-0.8, 0.6, 0}, {0, 0, 1}}));
  for (double v : s) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(Svd, FrobeniusIdentityAndOrder) {
  std::mt19937_64 rng(2);
  const Tensor m = normal_tensor({30, 7}, 1.0, rng);
  const auto s = singular_values(m);
  double sq = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    sq += s[i] * s[i];
    if (i > 0) {
      EXPECT_GE(s[i - 1], s[i]);
    }
  }
  EXPECT_NEAR(sq, frobenius_norm(m) * frobenius_norm(m), 1e-9);
}

// ---- optimizer -------------------------------------------------------------

TEST(Optimizer, WarmupThenCosine) {
  OptimizerConfig c;
  c.lr = 1.0;
  c.warmup_fraction = 0.1;
  EXPECT_NEAR(scheduled_lr(c, 0, 100), 0.1, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 9, 100), 1.0, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 10, 100), 1.0, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 55, 100), 0.5, 1e-12);
  EXPECT_LT(scheduled_lr(c, 99, 100), 1e-3);
}

TEST(Optimizer, FirstStepIsSignedLearningRate) {
  OptimizerConfig c;
  c.clip_norm = 0.0;
  ParameterSet s;
  s.add("bias", Tensor::matrix({{1.0, -2.0}}));
  s.add("weight", Tensor({2, 2}, 1.0));
  s.at("bias").grad = Tensor::matrix({{0.3, -4.0}});
  s.at("weight").grad = Tensor({2, 2}, 0.0);
  Adam adam(c, 10);
  adam.step({&s});
  const double lr = scheduled_lr(c, 0, 10);
  EXPECT_NEAR(s.at("bias").value(0, 0), 1.0 - lr * 0.3 / (0.3 + c.eps), 1e-15);
  EXPECT_NEAR(s.at("bias").value(0, 1), -2.0 + lr * 4.0 / (4.0 + c.eps), 1e-15);
  // Matrices decay even without gradient; biases do not.
  EXPECT_NEAR(s.at("weight").value(0, 0), 1.0 - lr * c.weight_decay, 1e-15);
}

TEST(Optimizer, ClipAndNonFinite) {
  OptimizerConfig c;
  ParameterSet s;
  Parameter& b = s.add("bias", Tensor::matrix({{0.0, 0.0}}));
  b.grad = Tensor::matrix({{3.0, 4.0}});
  Adam adam(c, 10);
  EXPECT_EQ(adam.step({&s}), 5.0);
  s.at("bias").grad = Tensor::matrix({{NAN, 0.0}});
  EXPECT_THROW(adam.step({&s}), TrainingError);
}

// ---- checkpoints -----------------------------------------------------------

TEST(Checkpoint, RoundTripByteIdentical) {
  const Checkpoint& c = trained().sft.checkpoint;
  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(c, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt", c.config_hash);
  EXPECT_EQ(back, c);
  save_checkpoint(back, dir / "b.ckpt");
  std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str().substr(0, 8), "EVLCKPT\n");
  EXPECT_EQ(static_cast<std::uint8_t>(sa.str()[8]), kCheckpointVersion);
  fs::remove_all(dir);
}

TEST(Checkpoint, MismatchedHashAndCorruption) {
  const Checkpoint& c = trained().sft.checkpoint;
  const fs::path dir = temp_dir("ckpt_bad");
  save_checkpoint(c, dir / "a.ckpt");
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", c.config_hash ^ 1), InputError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::string bytes = serialize(c);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() / 2)), InputError);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), InputError);
  fs::remove_all(dir);
}

TEST(Checkpoint, EncoderHashDependsOnConfig) {
  const ExperimentConfig c = tiny_experiment();
  EXPECT_NE(c.teacher_hash(), c.student_hash());
  EncoderConfig other = c.student;
  other.blocks = 2;
  EXPECT_NE(model_hash(other, 2, 400), c.student_hash());
}

// ---- training --------------------------------------------------------------

TEST(Training, EncoderShapes) {
  const ExperimentConfig c = tiny_experiment();
  const ParameterSet p = init_encoder(c.student, 2, 400, 3);
  const EcgRecord r = generate_record(1, c.data.generator, {1, 0, 0, 0, 0});
  Tape tape;
  const auto leaves = bind_all(tape, p, false);
  const EncoderOutput out = encoder_forward(tape, c.student, p, leaves, patchify(r, c.student.tokenizer).tokens);
  EXPECT_EQ(out.visual.shape(), (Shape{20, 8}));
  EXPECT_EQ(out.hidden.shape(), (Shape{10, 8}));
  EXPECT_EQ(out.logits.shape(), (Shape{1, 5}));
  EXPECT_EQ(p.scalar_count(), init_encoder(c.student, 2, 400, 4).scalar_count());
}

TEST(Training, ZeroStepsIsInitializationAtChance) {
  ExperimentConfig c = tiny_experiment();
  c.data.records = 200;
  c.data.teacher_extra_records = 2;
  const ExperimentData d = build_data(c, 2);
  double mean = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    const TrainResult r = train_teacher(c, d, 0, 100 + s, {2, {}});
    EXPECT_EQ(r.checkpoint.params, init_encoder(c.teacher, 2, 400, sub_seed(100 + s, 1)));
    EXPECT_TRUE(r.log.empty());
    mean += r.eval.macro_auc / seeds;
  }
  EXPECT_NEAR(mean, 0.5, 0.1);
}

TEST(Training, TeacherIsDeterministic) {
  const Trained& t = trained();
  const TrainResult again = train_teacher(t.cfg, t.data, t.cfg.train.teacher_steps, 7);
  EXPECT_EQ(serialize(again.checkpoint), serialize(t.teacher.checkpoint));
  EXPECT_EQ(to_json(again.eval), to_json(t.teacher.eval));
  const TrainResult threaded = train_teacher(t.cfg, t.data, t.cfg.train.teacher_steps, 7, {3, {}});
  for (std::size_t k = 0; k < threaded.checkpoint.params.items().size(); ++k)
    EXPECT_LE(max_abs_diff(threaded.checkpoint.params.items()[k].value, t.teacher.checkpoint.params.items()[k].value),
              1e-10);
}

TEST(Training, SftIsCeOnlyAndPersists) {
  const Trained& t = trained();
  ASSERT_EQ(t.sft.log.size(), t.cfg.train.sft_steps);
  for (const LossBreakdown& b : t.sft.log) {
    EXPECT_EQ(b.total, b.ce);
    EXPECT_EQ(b.ot, 0.0);
    EXPECT_EQ(b.mhca, 0.0);
  }
  const fs::path dir = temp_dir("sft");
  save_checkpoint(t.sft.checkpoint, dir / "sft.ckpt");
  const Checkpoint back = load_checkpoint(dir / "sft.ckpt", t.cfg.student_hash());
  const MetricsReport r = evaluate(t.cfg.student, back, t.data.split.eval, 1);
  EXPECT_EQ(r.macro_auc, back.metrics.at("macro_auc"));
  EXPECT_EQ(r.macro_f1, back.metrics.at("macro_f1"));
  EXPECT_EQ(r.hamming_loss, back.metrics.at("hamming_loss"));
  fs::remove_all(dir);
}

TEST(Training, DistillBreakdownsRecombine) {
  const Trained& t = trained();
  const TrainResult r = distill_student(t.cfg, t.cfg.distill, t.sft.checkpoint, t.teacher.checkpoint, t.data,
                                        t.cfg.train.distill_steps, 3);
  ASSERT_EQ(r.log.size(), t.cfg.train.distill_steps);
  for (const LossBreakdown& b : r.log) {
    EXPECT_NEAR(b.recombine(t.cfg.distill), b.total, 1e-12);
    EXPECT_GT(b.ot, 0.0);
    EXPECT_GT(b.mhca, 0.0);
    EXPECT_GT(b.rel, 0.0);
    EXPECT_NEAR(b.rel, (b.dist + b.angle) / 2.0, 1e-12);
  }
  EXPECT_TRUE(r.checkpoint.params.contains("ot.projection"));
  EXPECT_TRUE(r.checkpoint.params.contains("mhca.query"));
  EXPECT_EQ(encoder_params(r.checkpoint).items().size(), t.sft.checkpoint.params.items().size());
}

TEST(Training, DistillAlphaZeroIsCeContinuation) {
  const Trained& t = trained();
  DistillConfig a = t.cfg.distill;
  a.alpha = 0.0;
  DistillConfig b = a;
  b.lambda_m = b.lambda_r = b.lambda_ot = 0.0;
  const TrainResult ra = distill_student(t.cfg, a, t.sft.checkpoint, t.teacher.checkpoint, t.data, 4, 5);
  const TrainResult rb = distill_student(t.cfg, b, t.sft.checkpoint, t.teacher.checkpoint, t.data, 4, 5);
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    EXPECT_EQ(ra.log[i].ce, rb.log[i].ce);
    EXPECT_EQ(ra.log[i].total, ra.log[i].ce);
  }
  EXPECT_EQ(encoder_params(ra.checkpoint), encoder_params(rb.checkpoint));
}

TEST(Training, DistillDeterministicAndTeacherFrozen) {
  const Trained& t = trained();
  const std::string before = serialize(t.teacher.checkpoint);
  const TrainResult a = distill_student(t.cfg, t.cfg.distill, t.sft.checkpoint, t.teacher.checkpoint, t.data, 3, 9);
  const TrainResult b = distill_student(t.cfg, t.cfg.distill, t.sft.checkpoint, t.teacher.checkpoint, t.data, 3, 9);
  EXPECT_EQ(serialize(a.checkpoint), serialize(b.checkpoint));
  EXPECT_EQ(to_json(a.eval), to_json(b.eval));
  EXPECT_EQ(serialize(t.teacher.checkpoint), before);
}

TEST(Training, DistillRejectsSwappedCheckpoints) {
  const Trained& t = trained();
  EXPECT_THROW(distill_student(t.cfg, t.cfg.distill, t.teacher.checkpoint, t.sft.checkpoint, t.data, 1, 1),
               InputError);
}

TEST(Training, AblationProducesAllRuns) {
  const Trained& t = trained();
  ExperimentConfig c = t.cfg;
  c.train.teacher_steps = 2;
  c.train.sft_steps = 2;
  c.train.distill_steps = 2;
  const AblationResult r = run_ablation(c, t.data, 7);
  EXPECT_EQ(r.runs.size(), 8u);
  ASSERT_EQ(r.summary.size(), 4u);
  EXPECT_EQ(r.summary[0].config, ablation_names()[0]);
  EXPECT_EQ(r.summary[3].runs, 2u);
  EXPECT_NEAR(r.full_gain, r.summary[3].auc_mean - r.summary[0].auc_mean, 1e-15);
  const fs::path dir = temp_dir("ablation");
  write_ablation_csv(r, dir / "runs.csv", dir / "summary.csv");
  std::ifstream in(dir / "summary.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 5u);
  fs::remove_all(dir);
}

// ---- exports ---------------------------------------------------------------

TEST(Exports, LossLogColumns) {
  const fs::path dir = temp_dir("log");
  write_loss_log(trained().sft.log, dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,ce,ot,mhca,dist,angle,rel,total");
  fs::remove_all(dir);
}

TEST(Exports, SpectrumAndPlan) {
  const Trained& t = trained();
  const TrainResult d = distill_student(t.cfg, t.cfg.distill, t.sft.checkpoint, t.teacher.checkpoint, t.data, 2, 4);
  const fs::path dir = temp_dir("exports");
  svd_spectrum(t.cfg, d.checkpoint, t.teacher.checkpoint, t.data.split.eval, dir / "svd.csv", 1);
  std::ifstream in(dir / "svd.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "model,index,value");
  std::size_t student = 0, teacher = 0;
  while (std::getline(in, line)) (line.rfind("student,", 0) == 0 ? student : teacher)++;
  EXPECT_EQ(student, t.cfg.student.width);
  EXPECT_EQ(teacher, t.cfg.teacher.width);

  const TransportPlan p = record_plan(t.cfg, d.checkpoint, t.teacher.checkpoint, t.data.split.eval.records[0]);
  EXPECT_EQ(p.values.shape(), (Shape{40, 20}));
  EXPECT_LE(p.marginal_violation, 1e-6);
  EXPECT_THROW(record_plan(t.cfg, t.sft.checkpoint, t.teacher.checkpoint, t.data.split.eval.records[0]), InputError);
  fs::remove_all(dir);
}

// ---- configuration ---------------------------------------------------------

TEST(Experiment, JsonRoundTrip) {
  const ExperimentConfig c = tiny_experiment();
  EXPECT_EQ(to_json(experiment_from_json(to_json(c))), to_json(c));
  EXPECT_EQ(to_json(experiment_from_json(nlohmann::json::object())), to_json(default_experiment()));
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"model", 1}}), InputError);
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"train", {{"epochs", 3}}}}), InputError);
}

TEST(Experiment, DefaultsAreHeterogeneous) {
  const ExperimentConfig c = default_experiment();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.teacher.visual_tokens(12, 1000), 240u);
  EXPECT_EQ(c.student.visual_tokens(12, 1000), 120u);
  EXPECT_EQ(c.teacher.width, 96u);
  EXPECT_EQ(c.student.width, 48u);
  EXPECT_NE(c.teacher.tokenizer.embed_width, c.student.tokenizer.embed_width);
  EXPECT_EQ(c.teacher.length(12, 1000), 48u);
  EXPECT_EQ(c.student.length(12, 1000), 24u);
}

TEST(Experiment, ShippedConfigIsTheDefault) {
  EXPECT_EQ(to_json(load_experiment(EVL_DEFAULT_CONFIG)), to_json(default_experiment()));
}

TEST(Experiment, ValidateRejectsNarrowTeacher) {
  ExperimentConfig c = tiny_experiment();
  c.teacher.width = 8;
  EXPECT_THROW(c.validate(), ContractError);
  c = tiny_experiment();
  c.teacher.tokenizer = c.student.tokenizer;
  EXPECT_THROW(c.validate(), ContractError);
}

// ---- command line ----------------------------------------------------------

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = temp_dir("cli");
    std::ofstream(dir_ / "tiny.json") << to_json(tiny_experiment()).dump(2);
  }
  static std::string flags(const std::string& out) {
    return "--config " + (dir_ / "tiny.json").string() + " --out " + (dir_ / out).string();
  }
  static fs::path dir_;
};
fs::path Cli::dir_;

TEST_F(Cli, UnknownFlagIsUsageError) { EXPECT_EQ(run_cli("eval --bogus").code, 1); }

TEST_F(Cli, MissingSubcommand) { EXPECT_EQ(run_cli("").code, 1); }

TEST_F(Cli, VerifyPasses) {
  const CliResult r = run_cli("verify");
  EXPECT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["passed"], j["total"]);
}

TEST_F(Cli, MissingConfigIsIoError) { EXPECT_EQ(run_cli("sft --config /nonexistent/evl.json").code, 2); }

TEST_F(Cli, MissingCheckpointIsIoError) {
  EXPECT_EQ(run_cli("eval " + flags("e") + " --ckpt /nonexistent/x.ckpt").code, 2);
}

TEST_F(Cli, BadConfigIsContractError) {
  std::ofstream(dir_ / "bad.json") << R"({"distill": {"alpha": 2.0}})";
  EXPECT_EQ(run_cli("sft --config " + (dir_ / "bad.json").string()).code, 1);
}

TEST_F(Cli, DistillTwiceIsIdentical) {
  const CliResult a = run_cli("distill --seed 7 " + flags("run_a"));
  const CliResult b = run_cli("distill --seed 7 " + flags("run_b"));
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_TRUE(fs::exists(dir_ / "run_a" / "distill_log.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "run_a" / "teacher.ckpt"));

  // The distilled checkpoint then feeds eval, export-plan and svd-spectrum.
  const std::string out = flags("run_a");
  const CliResult e = run_cli("eval " + out + " --ckpt " + (dir_ / "run_a" / "distill.ckpt").string());
  EXPECT_EQ(e.code, 0);
  EXPECT_EQ(nlohmann::json::parse(e.out)["macro_auc"], nlohmann::json::parse(a.out)["macro_auc"]);
  EXPECT_EQ(run_cli("export-plan " + out + " --record 0").code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "run_a" / "plan_0.csv"));
  EXPECT_EQ(run_cli("svd-spectrum " + out).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "run_a" / "svd_spectrum.csv"));
  EXPECT_EQ(run_cli("export-plan " + out + " --record 999").code, 1);
}

TEST_F(Cli, GenDataThenImport) {
  const CliResult g = run_cli("gen-data " + flags("gen"));
  ASSERT_EQ(g.code, 0);
  const auto j = nlohmann::json::parse(g.out);
  EXPECT_EQ(j["train"].get<int>() + j["eval"].get<int>(), 24);
  EXPECT_EQ(run_cli("sft " + flags("gen_sft") + " --data " + (dir_ / "gen" / "data").string()).code, 0);
  // Importing under another generator config fails the hash check.
  ExperimentConfig other = tiny_experiment();
  other.data.generator.noise_fraction = 0.05;
  std::ofstream(dir_ / "other.json") << to_json(other).dump();
  EXPECT_EQ(run_cli("sft --config " + (dir_ / "other.json").string() + " --out " + (dir_ / "x").string() +
                    " --data " + (dir_ / "gen" / "data").string())
                .code,
            1);
}
