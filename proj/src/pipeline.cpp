#include "evl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "evl/errors.hpp"
#include "evl/mhca.hpp"
#include "evl/relation.hpp"
#include "evl/sinkhorn.hpp"
#include "evl/util.hpp"

namespace evl {

// ---- configuration ---------------------------------------------------------

void ExperimentConfig::validate() const {
  distill.validate();
  data.generator.validate();
  teacher.validate(n_leads(), n_samples());
  student.validate(n_leads(), n_samples());
  if (teacher.width <= student.width) {
    throw ContractError("teacher width " + std::to_string(teacher.width) +
                        " must exceed student width " + std::to_string(student.width));
  }
  const std::size_t vt = teacher.visual_tokens(n_leads(), n_samples());
  const std::size_t vs = student.visual_tokens(n_leads(), n_samples());
  if (vt <= vs) {
    throw ContractError("teacher visual tokens " + std::to_string(vt) +
                        " must exceed student visual tokens " + std::to_string(vs));
  }
  if (student.width % static_cast<std::size_t>(distill.heads) != 0) {
    throw ContractError("student width is not divisible by the MHCA head count");
  }
  if (data.records < 2 || !(data.split_ratio > 0.0 && data.split_ratio < 1.0)) {
    throw ContractError("data needs >= 2 records and a split ratio in (0, 1)");
  }
  if (train.batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (train.ablation_seeds.empty()) throw ContractError("ablation needs at least one seed");
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.teacher.tokenizer = {50, 50, 64, 11};
  c.teacher.width = 96;
  c.teacher.blocks = 4;
  c.teacher.heads = 4;
  c.student.tokenizer = {100, 100, 48, 12};
  c.student.width = 48;
  c.student.blocks = 2;
  c.student.heads = 4;
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"distill", to_json(c.distill)},
          {"data",
           {{"generator", to_json(c.data.generator)},
            {"records", c.data.records},
            {"split_ratio", c.data.split_ratio},
            {"teacher_extra_records", c.data.teacher_extra_records},
            {"seed", c.data.seed}}},
          {"teacher", to_json(c.teacher)},
          {"student", to_json(c.student)},
          {"train",
           {{"batch_size", c.train.batch_size},
            {"teacher_steps", c.train.teacher_steps},
            {"sft_steps", c.train.sft_steps},
            {"distill_steps", c.train.distill_steps},
            {"optimizer", to_json(c.train.optimizer)},
            {"ablation_seeds", c.train.ablation_seeds}}}};
}

namespace {

template <typename F>
void each_key(const nlohmann::json& j, const std::string& section, F&& f) {
  if (!j.is_object()) throw InputError("config section '" + section + "' must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (!f(key, v)) throw InputError("unknown key '" + key + "' in section '" + section + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("bad value for '" + section + "." + key + "': " + e.what());
    }
  }
}

}  // namespace

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c = default_experiment();
  each_key(j, "root", [&](const std::string& key, const nlohmann::json& v) {
    if (key == "distill") c.distill = distill_config_from_json(v);
    else if (key == "teacher") c.teacher = encoder_config_from_json(v);
    else if (key == "student") c.student = encoder_config_from_json(v);
    else if (key == "data") {
      each_key(v, "data", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "generator") c.data.generator = generator_config_from_json(x);
        else if (k == "records") c.data.records = x.get<std::size_t>();
        else if (k == "split_ratio") c.data.split_ratio = x.get<double>();
        else if (k == "teacher_extra_records") c.data.teacher_extra_records = x.get<std::size_t>();
        else if (k == "seed") c.data.seed = x.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (key == "train") {
      each_key(v, "train", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "batch_size") c.train.batch_size = x.get<std::size_t>();
        else if (k == "teacher_steps") c.train.teacher_steps = x.get<std::size_t>();
        else if (k == "sft_steps") c.train.sft_steps = x.get<std::size_t>();
        else if (k == "distill_steps") c.train.distill_steps = x.get<std::size_t>();
        else if (k == "optimizer") c.train.optimizer = optimizer_config_from_json(x);
        else if (k == "ablation_seeds") c.train.ablation_seeds = x.get<std::vector<std::uint64_t>>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed config " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

// ---- data ------------------------------------------------------------------

ExperimentData build_data(const ExperimentConfig& cfg, int threads) {
  ExperimentData d;
  d.split = make_dataset(cfg.data.records, cfg.data.split_ratio, cfg.data.seed, cfg.data.generator, threads);
  if (cfg.data.teacher_extra_records >= 2) {
    DatasetSplit extra = make_dataset(cfg.data.teacher_extra_records, 0.5,
                                      sub_seed(cfg.data.seed, 0x7eac4e7), cfg.data.generator, threads);
    for (auto* part : {&extra.train, &extra.eval})
      for (auto& r : part->records) d.teacher_extra.records.push_back(std::move(r));
  }
  return d;
}

TokenizedSet tokenize(const std::vector<const EcgRecord*>& records, const PatchTokenizerConfig& cfg,
                      int threads) {
  TokenizedSet out;
  out.tokens.resize(records.size());
  out.labels.resize(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    out.tokens[i] = patchify(*records[i], cfg).tokens;
    out.labels[i] = records[i]->labels;
  });
  return out;
}

TokenizedSet tokenize(const Dataset& data, const PatchTokenizerConfig& cfg, int threads) {
  std::vector<const EcgRecord*> ptrs;
  for (const auto& r : data.records) ptrs.push_back(&r);
  return tokenize(ptrs, cfg, threads);
}

namespace {

Tensor label_row(const std::vector<int>& labels) {
  Tensor t({1, labels.size()});
  for (std::size_t k = 0; k < labels.size(); ++k) t[k] = labels[k] ? 1.0 : 0.0;
  return t;
}

// ---- generic training loop -------------------------------------------------

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = n;
  }
  std::vector<std::size_t> next(std::size_t b) {
    std::vector<std::size_t> out;
    while (out.size() < b) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

struct SampleResult {
  std::vector<Tensor> grads;
  LossBreakdown parts;
};

// Fills result.grads (one per parameter of the trained sets, in order) and
// result.parts (already divided by the batch size) for one record.
using SampleStep = std::function<void(std::size_t record, std::size_t batch, SampleResult& result)>;

std::vector<LossBreakdown> train_loop(const std::vector<ParameterSet*>& sets, std::size_t n_train,
                                      std::size_t steps, std::size_t batch_size,
                                      const OptimizerConfig& ocfg, std::uint64_t order_seed,
                                      const SampleStep& sample, const RunOptions& opt) {
  if (n_train == 0) throw InputError("training set is empty");
  const std::size_t batch = std::min(batch_size, n_train);
  BatchSampler sampler(n_train, order_seed);
  Adam adam(ocfg, steps);
  std::vector<LossBreakdown> log;
  std::vector<SampleResult> results(batch);
  for (std::size_t step = 0; step < steps; ++step) {
    const std::vector<std::size_t> idx = sampler.next(batch);
    try {
      parallel_for(batch, opt.threads, [&](std::size_t b) { sample(idx[b], batch, results[b]); });
    } catch (const InputError& e) {
      throw TrainingError(e.what(), step);
    } catch (const ContractError& e) {
      throw TrainingError(e.what(), step);
    }
    LossBreakdown sum;
    for (ParameterSet* s : sets) s->zero_grad();
    for (const SampleResult& r : results) {
      std::size_t k = 0;
      for (ParameterSet* s : sets) {
        for (Parameter& p : s->items()) {
          auto g = p.grad.data();
          auto src = r.grads[k++].data();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        }
      }
      sum.ce += r.parts.ce;
      sum.ot += r.parts.ot;
      sum.mhca += r.parts.mhca;
      sum.dist += r.parts.dist;
      sum.angle += r.parts.angle;
      sum.rel += r.parts.rel;
      sum.total += r.parts.total;
    }
    if (!std::isfinite(sum.total)) throw TrainingError("non-finite loss", step);
    adam.step(sets);
    if (opt.on_step) opt.on_step(step, sum);
    log.push_back(sum);
  }
  return log;
}

void collect_grads(const Tape& tape, const std::vector<Var>& leaves, std::vector<Tensor>& out) {
  for (Var v : leaves) out.push_back(tape.grad(v));
}

TrainResult train_classifier(const EncoderConfig& enc, ParameterSet params, std::uint64_t hash,
                             const TokenizedSet& train, const Dataset& eval, std::size_t steps,
                             std::size_t batch, const OptimizerConfig& ocfg, std::uint64_t seed,
                             const RunOptions& opt) {
  SampleStep sample = [&](std::size_t rec, std::size_t b, SampleResult& res) {
    Tape tape;
    std::vector<Var> leaves = bind_all(tape, params, true);
    EncoderOutput out = encoder_forward(tape, enc, params, leaves, train.tokens[rec]);
    Var loss = scale(bce_with_logits(out.logits, label_row(train.labels[rec])), 1.0 / static_cast<double>(b));
    tape.backward(loss);
    res.grads.clear();
    collect_grads(tape, leaves, res.grads);
    res.parts = LossBreakdown{};
    res.parts.ce = loss.value().item();
    res.parts.total = res.parts.ce;
  };
  TrainResult result;
  result.log = train_loop({&params}, train.size(), steps, batch, ocfg, sub_seed(seed, 3), sample, opt);
  result.checkpoint.config_hash = hash;
  result.checkpoint.step = steps;
  result.checkpoint.params = std::move(params);
  result.eval = evaluate(enc, result.checkpoint, eval, opt.threads, seed);
  result.checkpoint.metrics = {{"hamming_loss", result.eval.hamming_loss},
                               {"macro_auc", result.eval.macro_auc},
                               {"macro_f1", result.eval.macro_f1}};
  return result;
}

}  // namespace

TrainResult train_teacher(const ExperimentConfig& cfg, const ExperimentData& data,
                          std::size_t steps, std::uint64_t seed, const RunOptions& opt) {
  cfg.validate();
  std::vector<const EcgRecord*> recs;
  for (const auto& r : data.split.train.records) recs.push_back(&r);
  for (const auto& r : data.teacher_extra.records) recs.push_back(&r);
  const TokenizedSet train = tokenize(recs, cfg.teacher.tokenizer, opt.threads);
  ParameterSet params = init_encoder(cfg.teacher, cfg.n_leads(), cfg.n_samples(), sub_seed(seed, 1));
  return train_classifier(cfg.teacher, std::move(params), cfg.teacher_hash(), train, data.split.eval,
                          steps, cfg.train.batch_size, cfg.train.optimizer, sub_seed(seed, 1), opt);
}

TrainResult sft_student(const ExperimentConfig& cfg, const ExperimentData& data,
                        std::size_t steps, std::uint64_t seed, const RunOptions& opt) {
  cfg.validate();
  const TokenizedSet train = tokenize(data.split.train, cfg.student.tokenizer, opt.threads);
  ParameterSet params = init_encoder(cfg.student, cfg.n_leads(), cfg.n_samples(), sub_seed(seed, 2));
  return train_classifier(cfg.student, std::move(params), cfg.student_hash(), train, data.split.eval,
                          steps, cfg.train.batch_size, cfg.train.optimizer, sub_seed(seed, 2), opt);
}

ParameterSet encoder_params(const Checkpoint& ckpt) {
  ParameterSet out;
  for (const auto& p : ckpt.params.items()) {
    if (p.name.rfind("mhca.", 0) == 0 || p.name.rfind("ot.", 0) == 0) continue;
    out.add(p.name, p.value);
  }
  return out;
}

namespace {

struct TeacherFeatures {
  Tensor visual;  // V_t x D_t
  Tensor hidden;  // L_t x D_t
};

std::vector<TeacherFeatures> teacher_features(const ExperimentConfig& cfg, const ParameterSet& params,
                                              const TokenizedSet& tokens, int threads) {
  std::vector<TeacherFeatures> out(tokens.size());
  parallel_for(tokens.size(), threads, [&](std::size_t i) {
    Tape tape;
    std::vector<Var> leaves = bind_all(tape, params, false);
    EncoderOutput o = encoder_forward(tape, cfg.teacher, params, leaves, tokens.tokens[i]);
    out[i] = {o.visual.value(), o.hidden.value()};
  });
  return out;
}

}  // namespace

TrainResult distill_student(const ExperimentConfig& cfg, const DistillConfig& dc,
                            const Checkpoint& sft, const Checkpoint& teacher,
                            const ExperimentData& data, std::size_t steps, std::uint64_t seed,
                            const RunOptions& opt) {
  cfg.validate();
  dc.validate();
  if (sft.config_hash != cfg.student_hash()) throw InputError("SFT checkpoint does not match the student config");
  if (teacher.config_hash != cfg.teacher_hash()) throw InputError("teacher checkpoint does not match the teacher config");
  const std::size_t ds = cfg.student.width, dt = cfg.teacher.width;
  if (ds % static_cast<std::size_t>(dc.heads) != 0) {
    throw ContractError("student width not divisible by " + std::to_string(dc.heads) + " MHCA heads");
  }

  ParameterSet student = encoder_params(sft);
  const ParameterSet teacher_params = encoder_params(teacher);
  const TokenizedSet s_tokens = tokenize(data.split.train, cfg.student.tokenizer, opt.threads);
  const TokenizedSet t_tokens = tokenize(data.split.train, cfg.teacher.tokenizer, opt.threads);
  const std::vector<TeacherFeatures> cache = teacher_features(cfg, teacher_params, t_tokens, opt.threads);

  MhcaParams shape = MhcaParams::init(ds, dt, static_cast<std::size_t>(dc.heads), sub_seed(seed, 11));
  ParameterSet aux;
  for (Parameter* p : shape.parameters()) aux.add(p->name, p->value);
  {
    std::mt19937_64 rng(sub_seed(seed, 12));
    aux.add("ot.projection", init_uniform(dt, ds, rng));
  }

  const double a = dc.alpha;
  const bool use_ot = a * dc.lambda_ot > 0.0;
  const bool use_mhca = a * dc.lambda_m > 0.0;
  const bool use_rel = a * dc.lambda_r > 0.0;
  const SinkhornOptions sk = dc.sinkhorn();

  SampleStep sample = [&](std::size_t rec, std::size_t b, SampleResult& res) {
    const double inv_b = 1.0 / static_cast<double>(b);
    Tape tape;
    std::vector<Var> sl = bind_all(tape, student, true);
    std::vector<Var> al = bind_all(tape, aux, true);
    EncoderOutput out = encoder_forward(tape, cfg.student, student, sl, s_tokens.tokens[rec]);
    Var ce = scale(bce_with_logits(out.logits, label_row(s_tokens.labels[rec])), inv_b);
    Var zero = tape.constant(Tensor::scalar(0.0));
    Var ot = zero, mhca = zero, rel = zero, dist = zero, angle = zero;
    if (use_ot) {
      Var t = l2_normalize_rows(matmul(tape.constant(cache[rec].visual), al[4]), kNormFloor);
      Var s = l2_normalize_rows(out.visual, kNormFloor);
      ot = scale(ot_loss(t, s, sk).loss, inv_b);
    }
    if (use_mhca || use_rel) {
      MhcaWeights w{al[0], al[1], al[2], al[3]};
      MhcaOutput m = mhca_forward(out.hidden, tape.constant(cache[rec].hidden), w, shape,
                                  dc.detach_query_target);
      if (use_mhca) mhca = mhca_sample_loss(out.hidden, m.aligned, b);
      if (use_rel) {
        RelationTerms r = relation_sample_terms(m.aligned, out.hidden, b, dc.detach_relation_teacher);
        rel = r.rel;
        dist = r.dist;
        angle = r.angle;
      }
    }
    Var total = total_loss(ce, mhca, rel, ot, dc);
    tape.backward(total);
    res.grads.clear();
    collect_grads(tape, sl, res.grads);
    collect_grads(tape, al, res.grads);
    res.parts = {ce.value().item(),  ot.value().item(),  mhca.value().item(), dist.value().item(),
                 angle.value().item(), rel.value().item(), total.value().item()};
  };

  TrainResult result;
  result.log = train_loop({&student, &aux}, s_tokens.size(), steps, cfg.train.batch_size,
                          cfg.train.optimizer, sub_seed(seed, 13), sample, opt);
  result.checkpoint.config_hash = cfg.student_hash();
  result.checkpoint.step = steps;
  result.checkpoint.params = student;
  result.eval = evaluate(cfg.student, result.checkpoint, data.split.eval, opt.threads, seed);
  for (const auto& p : aux.items()) result.checkpoint.params.add(p.name, p.value);
  result.checkpoint.metrics = {{"hamming_loss", result.eval.hamming_loss},
                               {"macro_auc", result.eval.macro_auc},
                               {"macro_f1", result.eval.macro_f1}};
  return result;
}

// ---- evaluation ------------------------------------------------------------

Tensor predict(const EncoderConfig& cfg, const ParameterSet& params, const TokenizedSet& data,
               int threads) {
  if (data.size() == 0) throw InputError("cannot predict on an empty set");
  Tensor scores({data.size(), cfg.classes});
  parallel_for(data.size(), threads, [&](std::size_t i) {
    Tape tape;
    std::vector<Var> leaves = bind_all(tape, params, false);
    const Tensor& z = encoder_forward(tape, cfg, params, leaves, data.tokens[i]).logits.value();
    for (std::size_t k = 0; k < cfg.classes; ++k) scores(i, k) = 1.0 / (1.0 + std::exp(-z[k]));
  });
  return scores;
}

MetricsReport evaluate(const EncoderConfig& cfg, const Checkpoint& ckpt, const Dataset& eval,
                       int threads, std::uint64_t seed) {
  if (eval.size() == 0) throw InputError("evaluation set is empty");
  const TokenizedSet data = tokenize(eval, cfg.tokenizer, threads);
  const ParameterSet params = encoder_params(ckpt);
  std::vector<std::string> names(class_names().begin(), class_names().end());
  names.resize(cfg.classes);
  MetricsReport r = compute_metrics(predict(cfg, params, data, threads), data.labels, names);
  r.seed = seed;
  return r;
}

Tensor stacked_hidden(const EncoderConfig& cfg, const ParameterSet& params, const Dataset& data,
                      int threads) {
  if (data.size() == 0) throw InputError("cannot stack hidden states of an empty set");
  const TokenizedSet tokens = tokenize(data, cfg.tokenizer, threads);
  std::vector<Tensor> hidden(tokens.size());
  parallel_for(tokens.size(), threads, [&](std::size_t i) {
    Tape tape;
    std::vector<Var> leaves = bind_all(tape, params, false);
    hidden[i] = encoder_forward(tape, cfg, params, leaves, tokens.tokens[i]).hidden.value();
  });
  const std::size_t l = hidden[0].rows(), d = hidden[0].cols();
  Tensor out({hidden.size() * l, d});
  for (std::size_t i = 0; i < hidden.size(); ++i)
    std::copy(hidden[i].data().begin(), hidden[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * l * d));
  return out;
}

void svd_spectrum(const ExperimentConfig& cfg, const Checkpoint& student, const Checkpoint& teacher,
                  const Dataset& data, const std::filesystem::path& path, int threads) {
  const auto s = singular_values(stacked_hidden(cfg.student, encoder_params(student), data, threads));
  const auto t = singular_values(stacked_hidden(cfg.teacher, encoder_params(teacher), data, threads));
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "model,index,value\n";
  for (std::size_t i = 0; i < s.size(); ++i) out << "student," << i << ',' << format_real(s[i]) << '\n';
  for (std::size_t i = 0; i < t.size(); ++i) out << "teacher," << i << ',' << format_real(t[i]) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

TransportPlan record_plan(const ExperimentConfig& cfg, const Checkpoint& distilled,
                          const Checkpoint& teacher, const EcgRecord& record) {
  if (!distilled.params.contains("ot.projection")) {
    throw InputError("checkpoint has no ot.projection; export-plan needs a distilled student");
  }
  const Tensor& proj = distilled.params.at("ot.projection").value;
  const ParameterSet sp = encoder_params(distilled);
  const ParameterSet tp = encoder_params(teacher);
  Tape tape;
  std::vector<Var> sl = bind_all(tape, sp, false);
  std::vector<Var> tl = bind_all(tape, tp, false);
  Var sv = encoder_forward(tape, cfg.student, sp, sl, patchify(record, cfg.student.tokenizer).tokens).visual;
  Var tv = encoder_forward(tape, cfg.teacher, tp, tl, patchify(record, cfg.teacher.tokenizer).tokens).visual;
  const TokenSet t = TokenSet::normalized(matmul(tv.value(), proj));
  const TokenSet s = TokenSet::normalized(sv.value());
  return sinkhorn(cost_matrix(t, s), cfg.distill.sinkhorn());
}

// ---- ablation --------------------------------------------------------------

AblationResult run_ablation(const ExperimentConfig& cfg, const ExperimentData& data,
                            std::uint64_t seed, const RunOptions& opt) {
  AblationResult out;
  const TrainResult teacher = train_teacher(cfg, data, cfg.train.teacher_steps, seed, opt);
  const TrainResult sft = sft_student(cfg, data, cfg.train.sft_steps, seed, opt);
  out.teacher_eval = teacher.eval;
  out.sft_eval = sft.eval;
  const auto masks = ablation_masks(cfg.distill);
  const auto names = ablation_names();
  for (std::size_t m = 0; m < masks.size(); ++m) {
    AblationSummary s;
    s.config = names[m];
    std::vector<double> auc, f1, ham;
    for (std::uint64_t rs : cfg.train.ablation_seeds) {
      TrainResult r = distill_student(cfg, masks[m], sft.checkpoint, teacher.checkpoint, data,
                                      cfg.train.distill_steps, rs, opt);
      out.runs.push_back({names[m], rs, r.eval});
      auc.push_back(r.eval.macro_auc);
      f1.push_back(r.eval.macro_f1);
      ham.push_back(r.eval.hamming_loss);
    }
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    s.runs = auc.size();
    stats(auc, s.auc_mean, s.auc_std);
    stats(f1, s.f1_mean, s.f1_std);
    stats(ham, s.hamming_mean, s.hamming_std);
    out.summary.push_back(s);
  }
  out.monotone = true;
  for (std::size_t i = 1; i < out.summary.size(); ++i)
    out.monotone = out.monotone && out.summary[i].auc_mean >= out.summary[i - 1].auc_mean;
  out.full_gain = out.summary.back().auc_mean - out.summary.front().auc_mean;
  return out;
}

void write_loss_log(const std::vector<LossBreakdown>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "step,ce,ot,mhca,dist,angle,rel,total\n";
  for (std::size_t i = 0; i < log.size(); ++i) {
    const LossBreakdown& b = log[i];
    out << i << ',' << format_real(b.ce) << ',' << format_real(b.ot) << ',' << format_real(b.mhca) << ','
        << format_real(b.dist) << ',' << format_real(b.angle) << ',' << format_real(b.rel) << ','
        << format_real(b.total) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_ablation_csv(const AblationResult& r, const std::filesystem::path& runs_path,
                        const std::filesystem::path& summary_path) {
  std::ofstream runs(runs_path);
  if (!runs) throw IoError("cannot open " + runs_path.string() + " for writing");
  runs << "config,seed,macro_auc,macro_f1,hamming_loss\n";
  for (const auto& run : r.runs) {
    runs << run.config << ',' << run.seed << ',' << format_real(run.metrics.macro_auc) << ','
         << format_real(run.metrics.macro_f1) << ',' << format_real(run.metrics.hamming_loss) << '\n';
  }
  std::ofstream sum(summary_path);
  if (!sum) throw IoError("cannot open " + summary_path.string() + " for writing");
  sum << "config,runs,auc_mean,auc_std,f1_mean,f1_std,hamming_mean,hamming_std\n";
  for (const auto& s : r.summary) {
    sum << s.config << ',' << s.runs << ',' << format_real(s.auc_mean) << ',' << format_real(s.auc_std)
        << ',' << format_real(s.f1_mean) << ',' << format_real(s.f1_std) << ','
        << format_real(s.hamming_mean) << ',' << format_real(s.hamming_std) << '\n';
  }
  if (!runs || !sum) throw IoError("write failed for ablation CSVs");
}

nlohmann::json to_json(const AblationResult& r) {
  nlohmann::json runs = nlohmann::json::array(), summary = nlohmann::json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"config", run.config},
                    {"seed", run.seed},
                    {"macro_auc", run.metrics.macro_auc},
                    {"macro_f1", run.metrics.macro_f1},
                    {"hamming_loss", run.metrics.hamming_loss}});
  }
  for (const auto& s : r.summary) {
    summary.push_back({{"config", s.config},
                       {"runs", s.runs},
                       {"auc_mean", s.auc_mean},
                       {"auc_std", s.auc_std},
                       {"f1_mean", s.f1_mean},
                       {"f1_std", s.f1_std},
                       {"hamming_mean", s.hamming_mean},
                       {"hamming_std", s.hamming_std}});
  }
  return {{"runs", runs},
          {"summary", summary},
          {"teacher_macro_auc", r.teacher_eval.macro_auc},
          {"sft_macro_auc", r.sft_eval.macro_auc},
          {"monotone", r.monotone},
          {"full_gain", r.full_gain}};
}

}  // namespace evl
