#include "evl/ecg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "evl/errors.hpp"
#include "evl/util.hpp"

namespace evl {

const std::array<std::string, kNumClasses>& class_names() {
  static const std::array<std::string, kNumClasses> names{
      "st_shift", "wide_qrs", "irregular_rhythm", "axis_deviation", "t_inversion"};
  return names;
}

void GeneratorConfig::validate() const {
  if (n_leads < 1) throw InputError("generator needs at least one lead");
  if (n_samples < 1) throw InputError("generator needs at least one sample");
  if (!(sample_rate > 0.0)) throw InputError("sample_rate must be positive");
  if (!(hr_min > 0.0 && hr_max >= hr_min)) throw InputError("heart-rate range is invalid");
  if (!(noise_fraction >= 0.0)) throw InputError("noise_fraction must be >= 0");
  if (!(class_rate > 0.0 && class_rate < 1.0)) throw InputError("class_rate must lie in (0, 1)");
  if (!(rr_jitter >= 0.0 && rr_jitter < 1.0)) throw InputError("rr_jitter must lie in [0, 1)");
  if (!(qrs_widen > 0.0)) throw InputError("qrs_widen must be positive");
  if (lead_gains.empty() || axis_gains.empty()) throw InputError("gain tables must be non-empty");
}

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"n_leads", c.n_leads},       {"n_samples", c.n_samples},
          {"sample_rate", c.sample_rate}, {"noise_fraction", c.noise_fraction},
          {"hr_min", c.hr_min},         {"hr_max", c.hr_max},
          {"class_rate", c.class_rate}, {"st_offset", c.st_offset},
          {"qrs_widen", c.qrs_widen},   {"rr_jitter", c.rr_jitter},
          {"lead_gains", c.lead_gains}, {"axis_gains", c.axis_gains}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("generator config must be a JSON object");
  GeneratorConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "n_leads") c.n_leads = v.get<std::size_t>();
      else if (key == "n_samples") c.n_samples = v.get<std::size_t>();
      else if (key == "sample_rate") c.sample_rate = v.get<double>();
      else if (key == "noise_fraction") c.noise_fraction = v.get<double>();
      else if (key == "hr_min") c.hr_min = v.get<double>();
      else if (key == "hr_max") c.hr_max = v.get<double>();
      else if (key == "class_rate") c.class_rate = v.get<double>();
      else if (key == "st_offset") c.st_offset = v.get<double>();
      else if (key == "qrs_widen") c.qrs_widen = v.get<double>();
      else if (key == "rr_jitter") c.rr_jitter = v.get<double>();
      else if (key == "lead_gains") c.lead_gains = v.get<std::vector<double>>();
      else if (key == "axis_gains") c.axis_gains = v.get<std::vector<double>>();
      else throw InputError("unknown generator config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("bad value for generator key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

std::uint64_t config_hash(const GeneratorConfig& cfg) { return fnv1a64(to_json(cfg).dump()); }

namespace {

double bump(double t, double center, double sigma) {
  const double z = (t - center) / sigma;
  return std::exp(-0.5 * z * z);
}

}  // namespace

EcgRecord generate_record(std::uint64_t seed, const GeneratorConfig& cfg,
                          const std::vector<int>& class_mask) {
  cfg.validate();
  if (class_mask.size() != kNumClasses) {
    throw InputError("class mask needs " + std::to_string(kNumClasses) + " entries, got " +
                     std::to_string(class_mask.size()));
  }
  auto active = [&](EcgClass c) { return class_mask[c] != 0; };

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double duration = static_cast<double>(cfg.n_samples) / cfg.sample_rate;
  const double hr = cfg.hr_min + (cfg.hr_max - cfg.hr_min) * unit(rng);
  const double rr = 60.0 / hr;
  const double phase = unit(rng);
  const double min_rr = rr * (1.0 - cfg.rr_jitter);
  const std::size_t n_jitter = static_cast<std::size_t>(std::ceil(duration / min_rr)) + 2;
  std::vector<double> jitter(n_jitter);
  for (auto& j : jitter) j = 2.0 * unit(rng) - 1.0;
  std::normal_distribution<double> noise_dist(0.0, 1.0);
  Tensor noise({cfg.n_leads, cfg.n_samples});
  for (auto& v : noise.data()) v = noise_dist(rng);

  BeatTemplate tpl;
  const BeatTemplate normal = tpl;
  if (active(kWideQrs)) {
    const double spacing = 0.5 * (1.0 + cfg.qrs_widen);
    tpl.q_sigma *= cfg.qrs_widen;
    tpl.r_sigma *= cfg.qrs_widen;
    tpl.s_sigma *= cfg.qrs_widen;
    tpl.q_center = tpl.r_center - (tpl.r_center - tpl.q_center) * spacing;
    tpl.s_center = tpl.r_center + (tpl.s_center - tpl.r_center) * spacing;
  }
  if (active(kIrregularRhythm)) tpl.p_amp = 0.0;
  if (active(kTInversion)) tpl.t_amp = -tpl.t_amp;
  const double st = active(kStShift) ? cfg.st_offset : 0.0;
  const double st_begin = normal.qrs_end();
  const double st_end = normal.t_onset();

  // Beat onsets: the first R peak falls inside the record; one extra beat
  // before it supplies the tail of the preceding T wave.
  std::vector<double> onsets;
  double onset = -tpl.r_center + phase * std::min(rr, duration);
  onsets.push_back(onset - rr);
  std::size_t k = 0;
  while (onset + normal.r_center < duration) {
    onsets.push_back(onset);
    const double dev = active(kIrregularRhythm) ? cfg.rr_jitter * jitter[k % n_jitter] : 0.0;
    onset += rr * (1.0 + dev);
    ++k;
  }

  std::vector<double> base(cfg.n_samples, 0.0);
  for (double o : onsets) {
    const auto first = static_cast<long>(std::floor((o - 0.2) * cfg.sample_rate));
    const auto last = static_cast<long>(std::ceil((o + 1.0) * cfg.sample_rate));
    for (long s = std::max(0L, first); s < std::min<long>(last, static_cast<long>(cfg.n_samples)); ++s) {
      const double tau = static_cast<double>(s) / cfg.sample_rate - o;
      double v = tpl.p_amp * bump(tau, tpl.p_center, tpl.p_sigma) +
                 tpl.q_amp * bump(tau, tpl.q_center, tpl.q_sigma) +
                 tpl.r_amp * bump(tau, tpl.r_center, tpl.r_sigma) +
                 tpl.s_amp * bump(tau, tpl.s_center, tpl.s_sigma) +
                 tpl.t_amp * bump(tau, tpl.t_center, tpl.t_sigma);
      if (tau >= st_begin && tau < st_end) v += st;
      base[static_cast<std::size_t>(s)] += v;
    }
  }

  EcgRecord rec;
  rec.seed = seed;
  rec.sample_rate = cfg.sample_rate;
  rec.labels = class_mask;
  for (double o : onsets)
    if (o + normal.r_center >= 0.0) rec.beat_onsets.push_back(o);
  rec.signal = Tensor({cfg.n_leads, cfg.n_samples});
  const double noise_sd = cfg.noise_fraction * normal.r_amp;
  for (std::size_t l = 0; l < cfg.n_leads; ++l) {
    const double gain = cfg.lead_gain(l) * (active(kAxisDeviation) ? cfg.axis_gain(l) : 1.0);
    for (std::size_t s = 0; s < cfg.n_samples; ++s)
      rec.signal(l, s) = gain * base[s] + noise_sd * noise(l, s);
  }
  return rec;
}

// ---- tokenizer -------------------------------------------------------------

void PatchTokenizerConfig::validate() const {
  if (patch_length < 1) throw InputError("patch_length must be >= 1");
  if (stride < 1) throw InputError("stride must be >= 1");
  if (embed_width < 1) throw InputError("embed_width must be >= 1");
}

std::size_t PatchTokenizerConfig::windows_per_lead(std::size_t n_samples) const {
  validate();
  if (patch_length > n_samples) {
    throw InputError("patch length " + std::to_string(patch_length) + " exceeds signal length " +
                     std::to_string(n_samples));
  }
  return (n_samples - patch_length) / stride + 1;
}

std::size_t PatchTokenizerConfig::token_count(std::size_t n_leads, std::size_t n_samples) const {
  return n_leads * windows_per_lead(n_samples);
}

nlohmann::json to_json(const PatchTokenizerConfig& c) {
  return {{"patch_length", c.patch_length},
          {"stride", c.stride},
          {"embed_width", c.embed_width},
          {"projection_seed", c.projection_seed}};
}

PatchTokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("tokenizer config must be a JSON object");
  PatchTokenizerConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "patch_length") c.patch_length = v.get<std::size_t>();
      else if (key == "stride") c.stride = v.get<std::size_t>();
      else if (key == "embed_width") c.embed_width = v.get<std::size_t>();
      else if (key == "projection_seed") c.projection_seed = v.get<std::uint64_t>();
      else throw InputError("unknown tokenizer config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("bad value for tokenizer key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

TokenSet patchify(const EcgRecord& record, const PatchTokenizerConfig& cfg) {
  const std::size_t n_leads = record.signal.rows();
  const std::size_t n_samples = record.signal.cols();
  const std::size_t per_lead = cfg.windows_per_lead(n_samples);
  std::mt19937_64 rng(cfg.projection_seed);
  const Tensor embed = normal_tensor({cfg.patch_length, cfg.embed_width},
                                     1.0 / std::sqrt(static_cast<double>(cfg.patch_length)), rng);
  Tensor windows({n_leads * per_lead, cfg.patch_length});
  for (std::size_t l = 0; l < n_leads; ++l) {
    for (std::size_t w = 0; w < per_lead; ++w) {
      auto dst = windows.row(l * per_lead + w);
      const double* src = record.signal.data().data() + l * n_samples + w * cfg.stride;
      std::copy(src, src + cfg.patch_length, dst.begin());
    }
  }
  return TokenSet::normalized(matmul(windows, embed));
}

// ---- datasets --------------------------------------------------------------

DatasetSplit make_dataset(std::size_t n_records, double split_ratio, std::uint64_t seed,
                          const GeneratorConfig& cfg, int threads) {
  if (n_records < 2) throw ContractError("make_dataset needs at least two records");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
    throw ContractError("split_ratio must lie in (0, 1)");
  }
  cfg.validate();

  std::vector<EcgRecord> all(n_records);
  parallel_for(n_records, threads, [&](std::size_t i) {
    const std::uint64_t rs = sub_seed(seed, i);
    std::mt19937_64 label_rng(splitmix64(rs ^ 0x6c6162656c73ULL));
    std::bernoulli_distribution draw(cfg.class_rate);
    std::vector<int> labels(kNumClasses);
    for (auto& l : labels) l = draw(label_rng) ? 1 : 0;
    all[i] = generate_record(rs, cfg, labels);
  });

  // Stratify: order by label pattern, then deal systematically into eval.
  std::vector<std::size_t> order(n_records);
  std::iota(order.begin(), order.end(), 0);
  auto pattern = [&](std::size_t i) {
    unsigned p = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) p |= static_cast<unsigned>(all[i].labels[c]) << c;
    return p;
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const unsigned pa = pattern(a), pb = pattern(b);
    if (pa != pb) return pa < pb;
    return splitmix64(all[a].seed) < splitmix64(all[b].seed);
  });
  auto n_eval = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_records) * (1.0 - split_ratio)));
  n_eval = std::clamp<std::size_t>(n_eval, 1, n_records - 1);
  std::vector<bool> is_eval(n_records, false);
  for (std::size_t p = 0; p < n_records; ++p) {
    if (((p + 1) * n_eval) / n_records > (p * n_eval) / n_records) is_eval[order[p]] = true;
  }

  DatasetSplit split;
  for (std::size_t i = 0; i < n_records; ++i)
    (is_eval[i] ? split.eval : split.train).records.push_back(std::move(all[i]));
  return split;
}

namespace {

constexpr char kRecordMagic[8] = {'E', 'V', 'L', 'R', 'E', 'C', '0', '1'};

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw InputError("truncated record file " + path.string());
  }
  return v;
}

void write_record(const EcgRecord& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kRecordMagic, sizeof kRecordMagic);
  put(out, static_cast<std::uint32_t>(r.signal.rows()));
  put(out, static_cast<std::uint32_t>(r.signal.cols()));
  put(out, r.sample_rate);
  put(out, r.seed);
  put(out, static_cast<std::uint32_t>(r.labels.size()));
  for (int l : r.labels) put(out, static_cast<std::uint8_t>(l));
  put(out, static_cast<std::uint32_t>(r.beat_onsets.size()));
  for (double o : r.beat_onsets) put(out, o);
  out.write(reinterpret_cast<const char*>(r.signal.data().data()),
            static_cast<std::streamsize>(r.signal.size() * sizeof(double)));
  if (!out) throw IoError("write failed for " + path.string());
}

EcgRecord read_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kRecordMagic, sizeof magic) != 0) {
    throw InputError("bad record header in " + path.string());
  }
  EcgRecord r;
  const auto leads = take<std::uint32_t>(in, path);
  const auto samples = take<std::uint32_t>(in, path);
  r.sample_rate = take<double>(in, path);
  r.seed = take<std::uint64_t>(in, path);
  const auto k = take<std::uint32_t>(in, path);
  for (std::uint32_t c = 0; c < k; ++c) r.labels.push_back(take<std::uint8_t>(in, path));
  const auto beats = take<std::uint32_t>(in, path);
  for (std::uint32_t b = 0; b < beats; ++b) r.beat_onsets.push_back(take<double>(in, path));
  r.signal = Tensor({leads, samples});
  if (!in.read(reinterpret_cast<char*>(r.signal.data().data()),
               static_cast<std::streamsize>(r.signal.size() * sizeof(double)))) {
    throw InputError("truncated signal in " + path.string());
  }
  return r;
}

}  // namespace

void export_dataset(const DatasetSplit& split, const GeneratorConfig& cfg,
                    const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "evl-dataset";
  manifest["version"] = 1;
  manifest["config_hash"] = hex64(config_hash(cfg));
  manifest["generator"] = to_json(cfg);
  manifest["records"] = nlohmann::json::array();
  std::size_t index = 0;
  auto emit = [&](const Dataset& d, const char* part) {
    for (const EcgRecord& r : d.records) {
      char name[32];
      std::snprintf(name, sizeof name, "record_%05zu.bin", index++);
      write_record(r, dir / name);
      manifest["records"].push_back(
          {{"file", name}, {"seed", r.seed}, {"labels", r.labels}, {"split", part}});
    }
  };
  emit(split.train, "train");
  emit(split.eval, "eval");
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

DatasetSplit import_dataset(const std::filesystem::path& dir, const GeneratorConfig& cfg) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed manifest: ") + e.what());
  }
  const std::string expected = hex64(config_hash(cfg));
  if (manifest.value("config_hash", std::string{}) != expected) {
    throw InputError("dataset config hash " + manifest.value("config_hash", std::string{"?"}) +
                     " does not match the current generator config " + expected);
  }
  DatasetSplit split;
  for (const auto& entry : manifest.at("records")) {
    EcgRecord r = read_record(dir / entry.at("file").get<std::string>());
    if (r.seed != entry.at("seed").get<std::uint64_t>() ||
        r.labels != entry.at("labels").get<std::vector<int>>()) {
      throw InputError("record " + entry.at("file").get<std::string>() +
                       " disagrees with the manifest");
    }
    (entry.at("split") == "eval" ? split.eval : split.train).records.push_back(std::move(r));
  }
  return split;
}

}  // namespace evl
