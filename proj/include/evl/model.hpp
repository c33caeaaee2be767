#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "evl/autodiff.hpp"
#include "evl/ecg.hpp"
#include "evl/parameter.hpp"

namespace evl {

struct EncoderConfig {
  PatchTokenizerConfig tokenizer;
  std::size_t width = 48;
  std::size_t blocks = 2;
  std::size_t heads = 4;       // self-attention heads
  std::size_t ffn_mult = 2;
  std::size_t pool = 5;        // visual tokens averaged per encoder position, within a lead
  std::size_t classes = kNumClasses;

  void validate(std::size_t n_leads, std::size_t n_samples) const;
  std::size_t visual_tokens(std::size_t n_leads, std::size_t n_samples) const {
    return tokenizer.token_count(n_leads, n_samples);
  }
  std::size_t length(std::size_t n_leads, std::size_t n_samples) const {
    return visual_tokens(n_leads, n_samples) / pool;
  }
};

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Ordered, named parameters. Order is the serialization and update order.
class ParameterSet {
 public:
  // The returned reference dies at the next add.
  Parameter& add(std::string name, Tensor value);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t scalar_count() const;
  void zero_grad();

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<Parameter> items_;
};

// Parameters of a pre-norm transformer encoder over pooled patch tokens.
ParameterSet init_encoder(const EncoderConfig& cfg, std::size_t n_leads, std::size_t n_samples,
                          std::uint64_t seed);

// Leaves of every parameter in a set, same order as the set.
std::vector<Var> bind_all(Tape& tape, const ParameterSet& params, bool trainable);

struct EncoderOutput {
  Var visual;   // V x D post-embedding visual tokens
  Var hidden;   // L x D final hidden states (after the closing layer norm)
  Var logits;   // 1 x K
};

// One sample. `tokens` are the tokenizer's V x E patch embeddings; `leaves`
// come from bind_all on the same parameter set.
EncoderOutput encoder_forward(Tape& tape, const EncoderConfig& cfg, const ParameterSet& params,
                              const std::vector<Var>& leaves, const Tensor& tokens);

// ---- optimizer -------------------------------------------------------------

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.0;          // no first-moment momentum by default
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled, matrices only
  double warmup_fraction = 0.03;
  double clip_norm = 1.0;      // global gradient norm; 0 disables
};

nlohmann::json to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);

// Linear warmup then cosine decay to zero over total_steps.
double scheduled_lr(const OptimizerConfig& cfg, std::size_t step, std::size_t total_steps);

class Adam {
 public:
  Adam(OptimizerConfig cfg, std::size_t total_steps);

  // Applies one update from the accumulated grads of every parameter in the
  // sets; returns the pre-clipping gradient norm.
  double step(const std::vector<ParameterSet*>& sets);
  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::size_t total_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::map<std::string, double> metrics;
  ParameterSet params;

  bool operator==(const Checkpoint& other) const;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::uint64_t model_hash(const EncoderConfig& cfg, std::size_t n_leads, std::size_t n_samples);

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws InputError when the stored hash differs from expected_hash.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evl
