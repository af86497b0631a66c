// hedgemamba: train a tiny softmax-attention teacher, distill it into a
// Hedgehog linear-attention student, lift that into a HedgeMamba mixer and
// fine-tune. Subcommands cover the full pipeline plus eval and the
// complexity benchmark.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "hm/commands.hpp"
#include "hm/config.hpp"
#include "hm/tensor.hpp"

namespace {

struct PendingOverrides {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> kv;
};

// Common flags; recorded as overrides so precedence stays
// defaults < config file < command line.
void add_common_flags(CLI::App* cmd, PendingOverrides& ov) {
  cmd->add_option_function<std::string>(
         "--config", [&ov](const std::string& v) { ov.config_file = v; },
         "key=value config file");
  auto kv = [&ov](const std::string& key) {
    return [&ov, key](const std::string& v) { ov.kv.emplace_back(key, v); };
  };
  cmd->add_option_function<std::string>("--out", kv("out_dir"),
                                        "output directory");
  cmd->add_option_function<std::string>("--seed", kv("seed"), "random seed");
  cmd->add_option_function<std::string>("--split", kv("split"),
                                        "token split S1/S2, e.g. 10/90");
  cmd->add_option_function<std::string>(
         "--mixer", kv("mixer"), "mixer kind: softmax|hedgehog|hedgemamba");
  cmd->add_option_function<std::string>(
      "--components",
      [&ov](const std::string& v) {
        const bool ssm = v.find("ssm") != std::string::npos;
        const bool conv = v.find("conv") != std::string::npos;
        const bool gate = v.find("gate") != std::string::npos;
        ov.kv.emplace_back("ssm_decay", ssm ? "true" : "false");
        ov.kv.emplace_back("conv", conv ? "true" : "false");
        ov.kv.emplace_back("gate", gate ? "true" : "false");
      },
      "enabled mamba components, e.g. ssm,conv,gate or none");
  cmd->add_option_function<std::string>("--tokens", kv("total_tokens"),
                                        "total distillation token budget");
  cmd->add_option_function<std::string>("--seq-len", kv("seq_len"),
                                        "sequence length");
  cmd->add_option_function<std::string>("--batch", kv("batch_size"),
                                        "batch size");
  cmd->add_option_function<std::string>("--corpus", kv("corpus"),
                                        "corpus file path");
  cmd->add_option_function<std::string>(
         "--set",
         [&ov](const std::string& s) {
           const auto eq = s.find('=');
           if (eq == std::string::npos) {
             throw CLI::ValidationError("--set expects key=value, got: " + s);
           }
           ov.kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
         },
         "extra override key=value (repeatable)")
      ->take_all();
}

hm::cli::RunConfig resolve(const PendingOverrides& ov) {
  hm::cli::RunConfig cfg;
  if (!ov.config_file.empty()) cfg.load_file(ov.config_file);
  for (const auto& [k, v] : ov.kv) cfg.set(k, v);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage transformer-to-mamba distillation at desk scale"};
  app.require_subcommand(1);

  PendingOverrides ov;
  int (*run)(const hm::cli::RunConfig&) = nullptr;

  struct SubDef {
    const char* name;
    const char* desc;
    int (*fn)(const hm::cli::RunConfig&);
  };
  const SubDef defs[] = {
      {"gen-corpus", "write a synthetic training corpus", hm::cli::cmd_gen_corpus},
      {"train-teacher", "train the softmax-attention teacher",
       hm::cli::cmd_train_teacher},
      {"distill", "run the two-stage distillation pipeline",
       hm::cli::cmd_distill},
      {"eval", "report validation perplexity of a checkpoint",
       hm::cli::cmd_eval},
      {"bench", "counted-operation complexity benchmark", hm::cli::cmd_bench},
      {"sweep", "distill across a grid of token splits", hm::cli::cmd_sweep},
  };
  for (const auto& def : defs) {
    CLI::App* sub = app.add_subcommand(def.name, def.desc);
    add_common_flags(sub, ov);
    if (std::string(def.name) == "gen-corpus") {
      sub->add_option_function<std::string>(
          "--bytes",
          [&ov](const std::string& v) { ov.kv.emplace_back("corpus_bytes", v); },
          "corpus size in bytes");
    }
    if (std::string(def.name) == "train-teacher") {
      sub->add_option_function<std::string>(
          "--steps",
          [&ov](const std::string& v) { ov.kv.emplace_back("teacher_steps", v); },
          "teacher training steps");
      sub->add_option_function<std::string>(
          "--lr",
          [&ov](const std::string& v) { ov.kv.emplace_back("teacher_lr", v); },
          "teacher peak learning rate");
    }
    if (std::string(def.name) == "distill" || std::string(def.name) == "sweep") {
      sub->add_option_function<std::string>(
          "--teacher",
          [&ov](const std::string& v) {
            ov.kv.emplace_back("teacher_checkpoint", v);
          },
          "teacher checkpoint path");
    }
    if (std::string(def.name) == "eval") {
      sub->add_option_function<std::string>(
          "--checkpoint",
          [&ov](const std::string& v) { ov.kv.emplace_back("checkpoint", v); },
          "checkpoint to evaluate");
    }
    if (std::string(def.name) == "sweep") {
      sub->add_option_function<std::string>(
          "--splits",
          [&ov](const std::string& v) { ov.kv.emplace_back("sweep_splits", v); },
          "comma-separated split list, e.g. 100/0,10/90");
      sub->add_flag_function(
          "--parallel",
          [&ov](std::int64_t) { ov.kv.emplace_back("sweep_parallel", "true"); },
          "run sweep arms in worker threads");
    }
    sub->callback([&run, fn = def.fn]() { run = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage error
  }

  try {
    hm::cli::init_logging();
    hm::cli::RunConfig cfg = resolve(ov);
    return run(cfg);
  } catch (const hm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
