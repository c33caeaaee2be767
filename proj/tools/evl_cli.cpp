// evl: data generation, training, distillation and analysis exports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "evl/errors.hpp"
#include "evl/pipeline.hpp"
#include "evl/sinkhorn.hpp"
#include "evl/util.hpp"
#include "evl/verify.hpp"

namespace fs = std::filesystem;
using namespace evl;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 7;
  std::string out = "evl_out";
  int threads = 1;
  std::string data;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment JSON (defaults built in)");
  sub->add_option("--seed", c.seed, "model / training seed");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--threads", c.threads, "worker threads; 1 is the determinism reference")
      ->check(CLI::PositiveNumber);
  sub->add_option("--data", c.data, "import a dataset written by gen-data instead of regenerating");
}

ExperimentConfig config_of(const Common& c) {
  return c.config.empty() ? default_experiment() : load_experiment(c.config);
}

ExperimentData data_of(const Common& c, const ExperimentConfig& cfg) {
  ExperimentData d = build_data(cfg, c.threads);
  if (!c.data.empty()) d.split = import_dataset(c.data, cfg.data.generator);
  return d;
}

fs::path out_dir(const Common& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create " + c.out + ": " + ec.message());
  return c.out;
}

RunOptions progress(const Common& c, const std::string& tag, std::size_t every = 50) {
  RunOptions o;
  o.threads = c.threads;
  o.on_step = [tag, every](std::size_t step, const LossBreakdown& b) {
    if (step % every == 0) std::fprintf(stderr, "[%s] step %zu total %.6f ce %.6f\n", tag.c_str(), step, b.total, b.ce);
  };
  return o;
}

void emit(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

nlohmann::json metrics_json(const MetricsReport& r, const std::string& what) {
  nlohmann::json j = to_json(r);
  j["model"] = what;
  return j;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

Checkpoint teacher_or_train(const Common& c, const ExperimentConfig& cfg, const ExperimentData& d,
                            const std::string& path) {
  if (fs::exists(path)) return load_checkpoint(path, cfg.teacher_hash());
  TrainResult r = train_teacher(cfg, d, cfg.train.teacher_steps, c.seed, progress(c, "teacher"));
  ensure_parent(path);
  save_checkpoint(r.checkpoint, path);
  write_loss_log(r.log, out_dir(c) / "teacher_log.csv");
  return r.checkpoint;
}

Checkpoint sft_or_train(const Common& c, const ExperimentConfig& cfg, const ExperimentData& d,
                        const std::string& path) {
  if (fs::exists(path)) return load_checkpoint(path, cfg.student_hash());
  TrainResult r = sft_student(cfg, d, cfg.train.sft_steps, c.seed, progress(c, "sft"));
  ensure_parent(path);
  save_checkpoint(r.checkpoint, path);
  write_loss_log(r.log, out_dir(c) / "sft_log.csv");
  return r.checkpoint;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heterogeneous ECG distillation toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string teacher_path, sft_path, ckpt_path, model = "student";
  std::size_t record = 0;

  auto* gen = app.add_subcommand("gen-data", "generate and export the synthetic dataset");
  auto* teach = app.add_subcommand("train-teacher", "train the teacher encoder");
  auto* sft = app.add_subcommand("sft", "task-loss-only student training");
  auto* distill = app.add_subcommand("distill", "distill the SFT student from the teacher");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  auto* ablate = app.add_subcommand("ablate", "4 loss configurations x ablation seeds");
  auto* verify = app.add_subcommand("verify", "run the invariant suite");
  auto* plan = app.add_subcommand("export-plan", "write one record's transport plan as CSV");
  auto* svd = app.add_subcommand("svd-spectrum", "singular values of stacked final hidden states");
  auto* show = app.add_subcommand("show-config", "print the effective experiment JSON");
  for (auto* s : {gen, teach, sft, distill, eval, ablate, verify, plan, svd, show}) add_common(s, common);
  for (auto* s : {distill, plan, svd}) {
    s->add_option("--teacher", teacher_path, "teacher checkpoint (default <out>/teacher.ckpt)");
  }
  distill->add_option("--sft", sft_path, "SFT checkpoint (default <out>/sft.ckpt)");
  eval->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
  eval->add_option("--model", model, "student or teacher")->check(CLI::IsMember({"student", "teacher"}));
  plan->add_option("--ckpt", ckpt_path, "distilled student (default <out>/distill.ckpt)");
  plan->add_option("--record", record, "eval-split record index");
  svd->add_option("--ckpt", ckpt_path, "student checkpoint (default <out>/distill.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    const ExperimentConfig cfg = config_of(common);
    const auto default_path = [&](std::string& p, const char* name) {
      if (p.empty()) p = (fs::path(common.out) / name).string();
    };

    if (*verify) {
      const auto results = run_verify_suite(common.seed, common.threads);
      std::size_t passed = 0;
      nlohmann::json checks = nlohmann::json::array();
      for (const auto& r : results) {
        passed += r.passed;
        checks.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
      }
      emit({{"passed", passed}, {"total", results.size()}, {"checks", checks}});
      return passed == results.size() ? 0 : 1;
    }

    if (*show) {
      emit(to_json(cfg));
      return 0;
    }

    const ExperimentData data = data_of(common, cfg);

    if (*gen) {
      const fs::path dir = out_dir(common) / "data";
      export_dataset(data.split, cfg.data.generator, dir);
      emit({{"dir", dir.string()},
            {"train", data.split.train.size()},
            {"eval", data.split.eval.size()},
            {"config_hash", hex64(config_hash(cfg.data.generator))}});
    } else if (*teach) {
      TrainResult r = train_teacher(cfg, data, cfg.train.teacher_steps, common.seed, progress(common, "teacher"));
      const fs::path dir = out_dir(common);
      save_checkpoint(r.checkpoint, dir / "teacher.ckpt");
      write_loss_log(r.log, dir / "teacher_log.csv");
      emit(metrics_json(r.eval, "teacher"));
    } else if (*sft) {
      TrainResult r = sft_student(cfg, data, cfg.train.sft_steps, common.seed, progress(common, "sft"));
      const fs::path dir = out_dir(common);
      save_checkpoint(r.checkpoint, dir / "sft.ckpt");
      write_loss_log(r.log, dir / "sft_log.csv");
      emit(metrics_json(r.eval, "sft"));
    } else if (*distill) {
      default_path(teacher_path, "teacher.ckpt");
      default_path(sft_path, "sft.ckpt");
      const Checkpoint t = teacher_or_train(common, cfg, data, teacher_path);
      const Checkpoint s = sft_or_train(common, cfg, data, sft_path);
      TrainResult r = distill_student(cfg, cfg.distill, s, t, data, cfg.train.distill_steps, common.seed,
                                      progress(common, "distill", 10));
      const fs::path dir = out_dir(common);
      save_checkpoint(r.checkpoint, dir / "distill.ckpt");
      write_loss_log(r.log, dir / "distill_log.csv");
      emit(metrics_json(r.eval, "distilled"));
    } else if (*eval) {
      const bool teacher = model == "teacher";
      const EncoderConfig& enc = teacher ? cfg.teacher : cfg.student;
      const Checkpoint c = load_checkpoint(ckpt_path, teacher ? cfg.teacher_hash() : cfg.student_hash());
      emit(metrics_json(evaluate(enc, c, data.split.eval, common.threads, common.seed), model));
    } else if (*ablate) {
      AblationResult r = run_ablation(cfg, data, common.seed, progress(common, "ablate", 50));
      const fs::path dir = out_dir(common);
      write_ablation_csv(r, dir / "ablation_runs.csv", dir / "ablation_summary.csv");
      emit(to_json(r));
    } else if (*plan) {
      default_path(teacher_path, "teacher.ckpt");
      default_path(ckpt_path, "distill.ckpt");
      if (record >= data.split.eval.size()) throw InputError("record index out of range");
      const TransportPlan p = record_plan(cfg, load_checkpoint(ckpt_path, cfg.student_hash()),
                                          load_checkpoint(teacher_path, cfg.teacher_hash()),
                                          data.split.eval.records[record]);
      const fs::path path = out_dir(common) / ("plan_" + std::to_string(record) + ".csv");
      export_plan(p, path);
      emit({{"path", path.string()},
            {"iterations", p.iterations_used},
            {"marginal_violation", p.marginal_violation},
            {"entropy", plan_entropy(p)}});
    } else if (*svd) {
      default_path(teacher_path, "teacher.ckpt");
      default_path(ckpt_path, "distill.ckpt");
      const fs::path path = out_dir(common) / "svd_spectrum.csv";
      svd_spectrum(cfg, load_checkpoint(ckpt_path, cfg.student_hash()),
                   load_checkpoint(teacher_path, cfg.teacher_hash()), data.split.eval, path,
                   common.threads);
      emit({{"path", path.string()}});
    }
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
