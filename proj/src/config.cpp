#include "hm/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace hm::cli {

namespace {

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("bad boolean value: " + s);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

double parse_split_percent(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) {
    throw std::invalid_argument("split must be S1/S2, e.g. 10/90: " + s);
  }
  const double s1 = std::stod(s.substr(0, slash));
  const double s2 = std::stod(s.substr(slash + 1));
  if (s1 < 0.0 || s2 < 0.0 || std::abs(s1 + s2 - 100.0) > 1e-9) {
    throw std::invalid_argument("split percentages must sum to 100: " + s);
  }
  return s1;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  // model
  if (key == "vocab_size") { model.vocab_size = std::stoull(value); return; }
  if (key == "d_model") { model.d_model = std::stoull(value); return; }
  if (key == "n_layers") { model.n_layers = std::stoull(value); return; }
  if (key == "n_heads") { model.n_heads = std::stoull(value); return; }
  if (key == "d_mlp") { model.d_mlp = std::stoull(value); return; }
  if (key == "rotary_fraction") { model.rotary_fraction = std::stod(value); return; }
  if (key == "mixer") { model.mixer_kind = model::mixer_kind_from_name(value); return; }
  if (key == "ssm_decay") { model.components.ssm_decay = parse_bool(value); return; }
  if (key == "conv") { model.components.conv = parse_bool(value); return; }
  if (key == "gate") { model.components.gate = parse_bool(value); return; }
  if (key == "conv_kernel") { model.conv_kernel = std::stoull(value); return; }
  if (key == "delta_rank") { model.delta_rank = std::stoull(value); return; }
  if (key == "seed") {
    model.seed = std::stoull(value);
    plan.seed = model.seed;
    return;
  }
  // plan
  if (key == "total_tokens") { plan.total_tokens = std::stoull(value); return; }
  if (key == "split") { plan.split_s1_percent = parse_split_percent(value); return; }
  if (key == "batch_size") { plan.batch_size = std::stoull(value); return; }
  if (key == "seq_len") { plan.seq_len = std::stoull(value); return; }
  if (key == "peak_lr_s1") { plan.peak_lr_s1 = std::stod(value); return; }
  if (key == "peak_lr_s2") { plan.peak_lr_s2 = std::stod(value); return; }
  if (key == "warmup_fraction") { plan.warmup_fraction = std::stod(value); return; }
  if (key == "min_lr_factor") { plan.min_lr_factor = std::stod(value); return; }
  if (key == "grad_clip") { plan.grad_clip = std::stod(value); return; }
  if (key == "weight_decay") { plan.weight_decay = std::stod(value); return; }
  if (key == "beta1") { plan.beta1 = std::stod(value); return; }
  if (key == "beta2") { plan.beta2 = std::stod(value); return; }
  // paths and command options
  if (key == "corpus") { corpus = value; return; }
  if (key == "out_dir") { out_dir = value; return; }
  if (key == "teacher_checkpoint") { teacher_checkpoint = value; return; }
  if (key == "checkpoint") { checkpoint = value; return; }
  if (key == "teacher_steps") { teacher_steps = std::stoull(value); return; }
  if (key == "teacher_lr") { teacher_lr = std::stod(value); return; }
  if (key == "log_interval") { log_interval = std::stoull(value); return; }
  if (key == "eval_interval") { eval_interval = std::stoull(value); return; }
  if (key == "val_windows") { val_windows = std::stoull(value); return; }
  if (key == "val_fraction") { val_fraction = std::stod(value); return; }
  if (key == "corpus_bytes") { corpus_bytes = std::stoull(value); return; }
  if (key == "bench_lengths") { bench_lengths = value; return; }
  if (key == "sweep_splits") { sweep_splits = value; return; }
  if (key == "sweep_parallel") { sweep_parallel = parse_bool(value); return; }
  if (key == "match_point") {
    if (value != "block" && value != "mixer") {
      throw std::invalid_argument("match_point must be block or mixer");
    }
    match_point = value;
    return;
  }
  throw std::invalid_argument("unknown config key: " + key);
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    // strip comments and whitespace
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b2 = s.find_first_not_of(" \t");
      const auto e2 = s.find_last_not_of(" \t");
      if (b2 == std::string::npos) return std::string();
      return s.substr(b2, e2 - b2 + 1);
    };
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::map<std::string, std::string> RunConfig::to_kv() const {
  std::map<std::string, std::string> kv = model::model_config_kv(model);
  kv["total_tokens"] = std::to_string(plan.total_tokens);
  {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g/%g", plan.split_s1_percent,
                  100.0 - plan.split_s1_percent);
    kv["split"] = buf;
  }
  kv["batch_size"] = std::to_string(plan.batch_size);
  kv["seq_len"] = std::to_string(plan.seq_len);
  kv["peak_lr_s1"] = fmt_double(plan.peak_lr_s1);
  kv["peak_lr_s2"] = fmt_double(plan.peak_lr_s2);
  kv["warmup_fraction"] = fmt_double(plan.warmup_fraction);
  kv["min_lr_factor"] = fmt_double(plan.min_lr_factor);
  kv["grad_clip"] = fmt_double(plan.grad_clip);
  kv["weight_decay"] = fmt_double(plan.weight_decay);
  kv["beta1"] = fmt_double(plan.beta1);
  kv["beta2"] = fmt_double(plan.beta2);
  kv["corpus"] = corpus;
  kv["out_dir"] = out_dir;
  kv["teacher_checkpoint"] = teacher_checkpoint;
  kv["checkpoint"] = checkpoint;
  kv["teacher_steps"] = std::to_string(teacher_steps);
  kv["teacher_lr"] = fmt_double(teacher_lr);
  kv["log_interval"] = std::to_string(log_interval);
  kv["eval_interval"] = std::to_string(eval_interval);
  kv["val_windows"] = std::to_string(val_windows);
  kv["val_fraction"] = fmt_double(val_fraction);
  kv["corpus_bytes"] = std::to_string(corpus_bytes);
  kv["bench_lengths"] = bench_lengths;
  kv["sweep_splits"] = sweep_splits;
  kv["sweep_parallel"] = sweep_parallel ? "true" : "false";
  kv["match_point"] = match_point;
  return kv;
}

distill::MatchPoint RunConfig::match_point_enum() const {
  return match_point == "mixer" ? distill::MatchPoint::mixer
                                : distill::MatchPoint::block;
}

std::vector<std::size_t> RunConfig::bench_lengths_list() const {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(bench_lengths, ',')) {
    out.push_back(std::stoull(s));
  }
  return out;
}

std::vector<double> RunConfig::sweep_splits_list() const {
  std::vector<double> out;
  for (const auto& s : split_list(sweep_splits, ',')) {
    out.push_back(parse_split_percent(s));
  }
  return out;
}

}  // namespace hm::cli
