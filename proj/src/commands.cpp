#include "hm/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "hm/bridge.hpp"

namespace hm::cli {

namespace {

LogLevel g_level = LogLevel::info;

std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
  std::filesystem::create_directories(cfg.out_dir);
  return std::filesystem::path(cfg.out_dir) / name;
}

data::Corpus load_run_corpus(const RunConfig& cfg) {
  if (cfg.corpus.empty()) {
    throw std::invalid_argument("no corpus path configured (key: corpus)");
  }
  return data::load_corpus({cfg.corpus}, cfg.val_fraction);
}

distill::TrainOptions train_options(const RunConfig& cfg,
                                    distill::MetricsWriter* writer) {
  distill::TrainOptions opts;
  opts.log_interval = cfg.log_interval;
  opts.eval_interval = cfg.eval_interval;
  opts.val_windows = cfg.val_windows;
  opts.match_point = cfg.match_point_enum();
  opts.writer = writer;
  return opts;
}

}  // namespace

void init_logging() {
  const char* env = std::getenv("HEDGEMAMBA_LOG");
  if (env == nullptr) return;
  const std::string v(env);
  if (v == "quiet") {
    set_log_level(LogLevel::quiet);
  } else if (v == "info") {
    set_log_level(LogLevel::info);
  } else if (v == "debug") {
    set_log_level(LogLevel::debug);
  } else {
    throw std::invalid_argument(
        "HEDGEMAMBA_LOG must be quiet, info or debug; got: " + v);
  }
}

void set_log_level(LogLevel level) {
  g_level = level;
  set_debug_checks(level == LogLevel::debug);
}

LogLevel log_level() { return g_level; }

void log_info(const std::string& msg) {
  if (g_level != LogLevel::quiet) std::cerr << "[hedgemamba] " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (g_level == LogLevel::debug) std::cerr << "[hedgemamba:debug] " << msg << "\n";
}

int cmd_gen_corpus(const RunConfig& cfg) {
  if (cfg.corpus.empty()) {
    throw std::invalid_argument("gen-corpus needs an output path (key: corpus)");
  }
  const auto parent = std::filesystem::path(cfg.corpus).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  data::generate_corpus_file(cfg.corpus, cfg.corpus_bytes, cfg.model.seed);
  log_info("wrote " + std::to_string(cfg.corpus_bytes) + " bytes to " +
           cfg.corpus);
  return 0;
}

int cmd_train_teacher(const RunConfig& cfg) {
  auto corpus = load_run_corpus(cfg);
  model::ModelConfig mc = cfg.model;
  mc.mixer_kind = model::MixerKind::softmax;
  model::Model teacher = model::build_model(mc);

  distill::DistillPlan plan = cfg.plan;
  plan.split_s1_percent = 0.0;  // CE-only training reuses the stage-2 loop
  plan.total_tokens = static_cast<std::uint64_t>(cfg.teacher_steps) *
                      plan.tokens_per_step();
  plan.peak_lr_s2 = cfg.teacher_lr;

  std::ofstream log_file(out_path(cfg, "teacher_metrics.log"));
  distill::MetricsWriter writer(log_file);
  distill::TrainMask mask;
  mask.embed = true;
  mask.unembed = true;
  auto metrics =
      distill::run_stage2(teacher, corpus, plan, mask, train_options(cfg, &writer));

  RunConfig saved = cfg;
  saved.model = mc;
  model::save_checkpoint(teacher, out_path(cfg, "teacher.ckpt").string(),
                         saved.to_kv());
  char buf[128];
  std::snprintf(buf, sizeof(buf), "teacher done: loss=%.4f val_ppl=%.3f",
                metrics.final_loss, metrics.final_val_ppl.value_or(0.0));
  log_info(buf);
  std::cout << "checkpoint=" << out_path(cfg, "teacher.ckpt").string()
            << " val_ppl=" << metrics.final_val_ppl.value_or(0.0) << "\n";
  return 0;
}

double run_distill_arm(const RunConfig& cfg, const model::Model& teacher,
                       const data::Corpus& corpus, double split_s1_percent,
                       const std::string& prefix) {
  distill::DistillPlan plan = cfg.plan;
  plan.split_s1_percent = split_s1_percent;
  plan.validate();

  std::ofstream log_file(out_path(cfg, prefix + ".log"));
  distill::MetricsWriter writer(log_file);
  auto opts = train_options(cfg, &writer);

  // student inherits the teacher architecture; mixer kind, components and
  // seeds come from the run config
  model::Model student =
      model::convert_mixer(teacher, model::MixerKind::hedgehog, plan.seed);
  student.cfg.components = cfg.model.components;

  if (plan.s1_steps() > 0) {
    auto m1 = distill::run_stage1(teacher, student, corpus, plan, opts);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s stage1 done: loss=%.5f", prefix.c_str(),
                  m1.final_loss);
    log_info(buf);
  }

  if (plan.s2_steps() > 0) {
    if (cfg.model.mixer_kind == model::MixerKind::hedgemamba) {
      student = model::convert_mixer(student, model::MixerKind::hedgemamba,
                                     plan.seed);
    }
    distill::TrainMask mask;  // embeddings frozen
    auto m2 = distill::run_stage2(student, corpus, plan, mask, opts);
    model::save_checkpoint(student, out_path(cfg, prefix + ".ckpt").string(),
                           cfg.to_kv());
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s done: val_ppl=%.4f", prefix.c_str(),
                  m2.final_val_ppl.value_or(0.0));
    log_info(buf);
    return m2.final_val_ppl.value_or(0.0);
  }

  // 100/0: no fine-tuning, the output model is the pure Hedgehog student
  const double ppl =
      data::perplexity(student, corpus, plan.seq_len, cfg.val_windows);
  model::save_checkpoint(student, out_path(cfg, prefix + ".ckpt").string(),
                         cfg.to_kv());
  distill::StageRecord rec{2, 0, 0, std::log(ppl), 0.0, ppl};
  writer.write(rec);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%s done (no stage 2): val_ppl=%.4f",
                prefix.c_str(), ppl);
  log_info(buf);
  return ppl;
}

int cmd_distill(const RunConfig& cfg) {
  if (cfg.teacher_checkpoint.empty()) {
    throw std::invalid_argument("distill needs teacher_checkpoint");
  }
  auto corpus = load_run_corpus(cfg);
  model::Model teacher = model::load_checkpoint(cfg.teacher_checkpoint);
  if (teacher.cfg.mixer_kind != model::MixerKind::softmax) {
    throw std::invalid_argument(
        "teacher checkpoint does not hold a softmax-attention model");
  }
  RunConfig run = cfg;
  // architecture comes from the teacher; mixer kind/components from cfg
  run.model = teacher.cfg;
  run.model.mixer_kind = cfg.model.mixer_kind;
  run.model.components = cfg.model.components;
  run.model.seed = cfg.model.seed;
  if (run.model.mixer_kind == model::MixerKind::softmax) {
    throw std::invalid_argument(
        "distill target mixer must be hedgehog or hedgemamba");
  }
  const double ppl = run_distill_arm(run, teacher, corpus,
                                     run.plan.split_s1_percent, "student");
  std::cout << "checkpoint=" << out_path(cfg, "student.ckpt").string()
            << " val_ppl=" << ppl << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) {
    throw std::invalid_argument("eval needs checkpoint");
  }
  auto corpus = load_run_corpus(cfg);
  model::Model m = model::load_checkpoint(cfg.checkpoint);
  const double ppl =
      data::perplexity(m, corpus, cfg.plan.seq_len, cfg.val_windows);
  std::ofstream report(out_path(cfg, "eval_report.txt"));
  report << "checkpoint=" << cfg.checkpoint << "\n";
  report << "corpus=" << cfg.corpus << "\n";
  report << "mixer=" << model::mixer_kind_name(m.cfg.mixer_kind) << "\n";
  report << "seq_len=" << cfg.plan.seq_len << "\n";
  report << "val_windows=" << cfg.val_windows << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10f", ppl);
  report << "val_ppl=" << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.10f", std::log(ppl));
  report << "val_nll=" << buf << "\n";
  std::cout << "val_ppl=" << ppl << "\n";
  return 0;
}

int cmd_bench(const RunConfig& cfg) {
  const auto lengths = cfg.bench_lengths_list();
  std::vector<data::BenchCurve> curves;
  for (auto kind : {model::MixerKind::softmax, model::MixerKind::hedgehog,
                    model::MixerKind::hedgemamba}) {
    curves.push_back(data::flop_bench(kind, lengths, cfg.model.head_dim()));
  }
  std::ofstream csv(out_path(cfg, "bench.csv"));
  data::write_bench_csv(csv, curves);
  data::write_bench_csv(std::cout, curves);
  return 0;
}

int cmd_sweep(const RunConfig& cfg) {
  if (cfg.teacher_checkpoint.empty()) {
    throw std::invalid_argument("sweep needs teacher_checkpoint");
  }
  auto corpus = load_run_corpus(cfg);
  model::Model teacher = model::load_checkpoint(cfg.teacher_checkpoint);
  RunConfig run = cfg;
  run.model = teacher.cfg;
  run.model.mixer_kind = cfg.model.mixer_kind;
  run.model.components = cfg.model.components;
  run.model.seed = cfg.model.seed;
  if (run.model.mixer_kind == model::MixerKind::softmax) {
    run.model.mixer_kind = model::MixerKind::hedgemamba;
  }

  const auto splits = cfg.sweep_splits_list();
  std::vector<std::string> prefixes;
  for (double s1 : splits) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "sweep_%g_%g", s1, 100.0 - s1);
    prefixes.push_back(buf);
  }
  std::vector<double> ppls(splits.size(), 0.0);
  if (cfg.sweep_parallel) {
    // arms are independent: each worker owns its student and tapes
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < splits.size(); ++i) {
      workers.emplace_back([&, i]() {
        ppls[i] = run_distill_arm(run, teacher, corpus, splits[i], prefixes[i]);
      });
    }
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < splits.size(); ++i) {
      ppls[i] = run_distill_arm(run, teacher, corpus, splits[i], prefixes[i]);
    }
  }
  for (std::size_t i = 0; i < splits.size(); ++i) {
    std::cout << "split=" << splits[i] << "/" << (100.0 - splits[i])
              << " val_ppl=" << ppls[i] << "\n";
  }
  return 0;
}

}  // namespace hm::cli
