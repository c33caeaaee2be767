#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "evl/sinkhorn.hpp"
#include "evl/tensor.hpp"

namespace evl {

inline constexpr std::size_t kNumClasses = 5;

// Class indices of the synthetic diagnosis labels.
enum EcgClass : std::size_t {
  kStShift = 0,
  kWideQrs = 1,
  kIrregularRhythm = 2,
  kAxisDeviation = 3,
  kTInversion = 4,
};

const std::array<std::string, kNumClasses>& class_names();

// Gaussian-bump beat morphology. Centers are seconds after beat onset.
struct BeatTemplate {
  double p_amp = 0.12, p_center = 0.10, p_sigma = 0.022;
  double q_amp = -0.12, q_center = 0.215, q_sigma = 0.010;
  double r_amp = 1.0, r_center = 0.24, r_sigma = 0.011;
  double s_amp = -0.25, s_center = 0.265, s_sigma = 0.011;
  double t_amp = 0.30, t_center = 0.50, t_sigma = 0.045;

  double qrs_end() const { return s_center + 3.0 * s_sigma; }
  double t_onset() const { return t_center - 2.0 * t_sigma; }
};

struct GeneratorConfig {
  std::size_t n_leads = 12;
  std::size_t n_samples = 1000;
  double sample_rate = 100.0;
  double noise_fraction = 0.02;  // white-noise sd relative to the R amplitude
  double hr_min = 55.0;
  double hr_max = 95.0;
  double class_rate = 0.3;       // target positive rate per class
  double st_offset = 0.15;       // added between QRS end and T onset
  double qrs_widen = 2.2;        // Q/R/S width multiplier
  double rr_jitter = 0.3;        // max relative RR deviation for irregular rhythm
  std::vector<double> lead_gains{0.9, 1.1, 0.5, -0.8, 0.35, 0.75, 0.4, 0.9, 1.3, 1.5, 1.3, 1.0};
  std::vector<double> axis_gains{-0.7, 0.4, 1.8, 1.0, -1.0, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};

  void validate() const;
  // Gain of lead l; the tables repeat for more than 12 leads.
  double lead_gain(std::size_t lead) const { return lead_gains[lead % lead_gains.size()]; }
  double axis_gain(std::size_t lead) const { return axis_gains[lead % axis_gains.size()]; }
};

nlohmann::json to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
std::uint64_t config_hash(const GeneratorConfig& cfg);

struct EcgRecord {
  Tensor signal;  // n_leads x n_samples
  double sample_rate = 0.0;
  std::vector<int> labels;         // 0/1 per class
  std::uint64_t seed = 0;
  std::vector<double> beat_onsets; // seconds; beats whose R peak lies in the record
};

// Every random draw happens regardless of the class mask, so two masks with
// the same seed share heart rate, beat phase, jitter and noise.
//
// Perturbations per active class:
//   st_shift          constant offset (times the lead gain) on [QRS end, T onset)
//   wide_qrs          Q, R, S widths and spacing scaled by qrs_widen
//   irregular_rhythm  RR intervals jittered by up to +-rr_jitter, P waves dropped
//   axis_deviation    per-lead gains multiplied by axis_gains
//   t_inversion       T wave polarity flipped
EcgRecord generate_record(std::uint64_t seed, const GeneratorConfig& cfg,
                          const std::vector<int>& class_mask);

struct PatchTokenizerConfig {
  std::size_t patch_length = 50;
  std::size_t stride = 50;
  std::size_t embed_width = 48;
  std::uint64_t projection_seed = 1;

  std::size_t windows_per_lead(std::size_t n_samples) const;
  std::size_t token_count(std::size_t n_leads, std::size_t n_samples) const;
  void validate() const;
};

nlohmann::json to_json(const PatchTokenizerConfig& cfg);
PatchTokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);

// Sliding windows per lead, embedded by a fixed seeded Gaussian map and
// L2-normalized. Token order is lead-major, then time.
TokenSet patchify(const EcgRecord& record, const PatchTokenizerConfig& cfg);

struct Dataset {
  std::vector<EcgRecord> records;
  std::size_t size() const { return records.size(); }
};

struct DatasetSplit {
  Dataset train;
  Dataset eval;
};

// Labels are drawn per record from its own sub-seed. The split is stratified
// by label pattern so per-class rates match across the two parts.
DatasetSplit make_dataset(std::size_t n_records, double split_ratio, std::uint64_t seed,
                          const GeneratorConfig& cfg = {}, int threads = 1);

// Per-record binary files plus manifest.json (seeds, config hash, labels, split).
void export_dataset(const DatasetSplit& split, const GeneratorConfig& cfg,
                    const std::filesystem::path& dir);
// Fails with InputError when the manifest's config hash differs from cfg's.
DatasetSplit import_dataset(const std::filesystem::path& dir, const GeneratorConfig& cfg);

}  // namespace evl
