#pragma once

// Run configuration: union of model and plan hyperparameters plus paths and
// command options. Loadable from key=value text files, overridable from the
// command line, and serialized in full into every checkpoint header.
// Precedence: defaults < file < flags.

#include <map>
#include <string>

#include "hm/distill.hpp"
#include "hm/model.hpp"

namespace hm::cli {

struct RunConfig {
  model::ModelConfig model;
  distill::DistillPlan plan;

  std::string corpus;              // corpus file path
  std::string out_dir = "out";
  std::string teacher_checkpoint;  // input for distill/sweep
  std::string checkpoint;          // input for eval

  std::size_t teacher_steps = 2000;
  double teacher_lr = 2e-3;
  std::size_t log_interval = 25;
  std::size_t eval_interval = 200;
  std::size_t val_windows = 64;
  double val_fraction = 0.01;
  std::size_t corpus_bytes = 4 * 1024 * 1024;
  std::string bench_lengths = "64,128,256,512,1024";
  std::string sweep_splits = "100/0,50/50,10/90,0/100";
  bool sweep_parallel = false;
  std::string match_point = "block";  // or "mixer"

  // Applies one key; throws std::invalid_argument on unknown keys or bad
  // values. "seed" sets both the model and the plan seed; "split" takes the
  // "S1/S2" percent form.
  void set(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  std::map<std::string, std::string> to_kv() const;

  distill::MatchPoint match_point_enum() const;
  std::vector<std::size_t> bench_lengths_list() const;
  std::vector<double> sweep_splits_list() const;  // stage-1 percents
};

double parse_split_percent(const std::string& s);  // "10/90" -> 10.0

}  // namespace hm::cli
