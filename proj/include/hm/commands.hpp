#pragma once

// The CLI subcommands as library functions, so tests can drive the same
// pipeline the binary runs. Each returns an exit code: 0 success.

#include <string>

#include "hm/config.hpp"

namespace hm::cli {

enum class LogLevel { quiet, info, debug };

// Reads HEDGEMAMBA_LOG ({quiet|info|debug}, default info); debug also turns
// on the extra runtime checks.
void init_logging();
void set_log_level(LogLevel level);
LogLevel log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

int cmd_gen_corpus(const RunConfig& cfg);
int cmd_train_teacher(const RunConfig& cfg);
int cmd_distill(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_bench(const RunConfig& cfg);
int cmd_sweep(const RunConfig& cfg);

// Runs the full stage-1 / bridge / stage-2 pipeline for one split arm and
// writes <prefix>.ckpt, <prefix>.log under cfg.out_dir. Returns the final
// validation perplexity.
double run_distill_arm(const RunConfig& cfg, const model::Model& teacher,
                       const data::Corpus& corpus, double split_s1_percent,
                       const std::string& prefix);

}  // namespace hm::cli
