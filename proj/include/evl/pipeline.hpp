#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "evl/ecg.hpp"
#include "evl/metrics.hpp"
#include "evl/model.hpp"
#include "evl/objective.hpp"

namespace evl {

struct DataConfig {
  GeneratorConfig generator;
  std::size_t records = 200;                // student train + eval
  double split_ratio = 0.8;
  std::size_t teacher_extra_records = 600;  // seen by the teacher only
  std::uint64_t seed = 2024;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t teacher_steps = 600;
  std::size_t sft_steps = 150;
  std::size_t distill_steps = 150;
  OptimizerConfig optimizer;
  std::vector<std::uint64_t> ablation_seeds{1, 2, 3};
};

struct ExperimentConfig {
  DistillConfig distill;
  DataConfig data;
  EncoderConfig teacher;
  EncoderConfig student;
  TrainConfig train;

  // Teacher must be strictly wider and see strictly more visual tokens.
  void validate() const;
  std::size_t n_leads() const { return data.generator.n_leads; }
  std::size_t n_samples() const { return data.generator.n_samples; }
  std::uint64_t teacher_hash() const { return model_hash(teacher, n_leads(), n_samples()); }
  std::uint64_t student_hash() const { return model_hash(student, n_leads(), n_samples()); }
};

ExperimentConfig default_experiment();
nlohmann::json to_json(const ExperimentConfig& cfg);
// Sections: distill, data, teacher, student, train. Unknown keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct ExperimentData {
  DatasetSplit split;
  Dataset teacher_extra;
};

ExperimentData build_data(const ExperimentConfig& cfg, int threads);

// Tokenized records ready for an encoder.
struct TokenizedSet {
  std::vector<Tensor> tokens;
  std::vector<std::vector<int>> labels;
  std::size_t size() const { return tokens.size(); }
};

TokenizedSet tokenize(const std::vector<const EcgRecord*>& records, const PatchTokenizerConfig& cfg,
                      int threads);
TokenizedSet tokenize(const Dataset& data, const PatchTokenizerConfig& cfg, int threads);

struct RunOptions {
  int threads = 1;
  // Called after every step with the step index and its loss breakdown.
  std::function<void(std::size_t, const LossBreakdown&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossBreakdown> log;
  MetricsReport eval;
};

// Plain task-loss training from a fresh initialization.
TrainResult train_teacher(const ExperimentConfig& cfg, const ExperimentData& data,
                          std::size_t steps, std::uint64_t seed, const RunOptions& opt = {});
// Task-loss-only student training; alpha is forced to 0.
TrainResult sft_student(const ExperimentConfig& cfg, const ExperimentData& data,
                        std::size_t steps, std::uint64_t seed, const RunOptions& opt = {});
// Starts from the SFT checkpoint with fresh MHCA / projection parameters and
// fresh optimizer state. The returned checkpoint also holds the "mhca.*" and
// "ot.projection" tensors.
TrainResult distill_student(const ExperimentConfig& cfg, const DistillConfig& distill,
                            const Checkpoint& sft, const Checkpoint& teacher,
                            const ExperimentData& data, std::size_t steps, std::uint64_t seed,
                            const RunOptions& opt = {});

// Encoder tensors of a checkpoint, without the distillation extras.
ParameterSet encoder_params(const Checkpoint& ckpt);

// Sigmoid scores (N x K) of an encoder over tokenized records.
Tensor predict(const EncoderConfig& cfg, const ParameterSet& params, const TokenizedSet& data,
               int threads);
MetricsReport evaluate(const EncoderConfig& cfg, const Checkpoint& ckpt, const Dataset& eval,
                       int threads, std::uint64_t seed = 0);

// Final hidden states of every record stacked into an (N L) x D matrix.
Tensor stacked_hidden(const EncoderConfig& cfg, const ParameterSet& params, const Dataset& data,
                      int threads);
// CSV rows "model,index,value" with singular values of both models.
void svd_spectrum(const ExperimentConfig& cfg, const Checkpoint& student,
                  const Checkpoint& teacher, const Dataset& data,
                  const std::filesystem::path& path, int threads);

// Transport plan between the teacher's projected visual tokens and the
// student's visual tokens for one record. Needs a distilled student
// checkpoint (for "ot.projection").
TransportPlan record_plan(const ExperimentConfig& cfg, const Checkpoint& distilled,
                          const Checkpoint& teacher, const EcgRecord& record);

struct AblationRun {
  std::string config;
  std::uint64_t seed = 0;
  MetricsReport metrics;
};

struct AblationSummary {
  std::string config;
  std::size_t runs = 0;
  double auc_mean = 0.0, auc_std = 0.0;
  double f1_mean = 0.0, f1_std = 0.0;
  double hamming_mean = 0.0, hamming_std = 0.0;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationSummary> summary;  // ablation_names() order
  MetricsReport teacher_eval;
  MetricsReport sft_eval;
  bool monotone = false;
  double full_gain = 0.0;  // full mean AUC minus baseline mean AUC
};

// Teacher and SFT student trained once with `seed`, then every ablation row
// distilled once per configured ablation seed.
AblationResult run_ablation(const ExperimentConfig& cfg, const ExperimentData& data,
                            std::uint64_t seed, const RunOptions& opt = {});

void write_loss_log(const std::vector<LossBreakdown>& log, const std::filesystem::path& path);
void write_ablation_csv(const AblationResult& result, const std::filesystem::path& runs_path,
                        const std::filesystem::path& summary_path);
nlohmann::json to_json(const AblationResult& result);

}  // namespace evl
