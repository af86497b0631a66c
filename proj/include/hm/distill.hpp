#pragma once

// Two-stage training engine: stage-1 per-layer cosine matching against a
// frozen teacher, stage-2 cross-entropy fine-tuning, AdamW with global-norm
// clipping, warmup + cosine learning-rate schedule, token-budget split.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hm/data.hpp"
#include "hm/model.hpp"
#include "hm/tensor.hpp"

namespace hm::distill {

struct DistillPlan {
  std::uint64_t total_tokens = 1u << 20;
  double split_s1_percent = 10.0;  // share of tokens spent in stage 1
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double peak_lr_s1 = 1e-2;
  double peak_lr_s2 = 1e-3;
  double warmup_fraction = 0.1;
  double min_lr_factor = 0.1;
  double grad_clip = 1.0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::uint64_t seed = 1;

  std::size_t tokens_per_step() const { return batch_size * seq_len; }
  // Steps are integer: the total rounds to the nearest step, stage 1 takes
  // the floor of its share and stage 2 the remainder, so
  // s1_steps + s2_steps == total_steps exactly.
  std::size_t total_steps() const;
  std::size_t s1_steps() const;
  std::size_t s2_steps() const { return total_steps() - s1_steps(); }
  std::uint64_t effective_total_tokens() const {
    return static_cast<std::uint64_t>(total_steps()) * tokens_per_step();
  }
  void validate() const;
};

// Per-group trainability mask for stage 2. The paper's default: everything
// trains except the input/output embedding matrices.
struct TrainMask {
  bool embed = false;
  bool unembed = false;
  bool norms = true;
  bool mixer = true;
  bool mlp = true;

  bool trainable(const std::string& param_name) const;
};

enum class MatchPoint { block, mixer };

// mean over layers and positions of (1 - cos(teacher_row, student_row));
// zero-norm rows contribute exactly 1.
Tensor stage1_loss(const std::vector<Tensor>& teacher_outputs,
                   const std::vector<Tensor>& student_outputs);
// single-pair variant (one layer)
Tensor cosine_match_loss(const Tensor& student, const Tensor& teacher);

// mean token-level negative log-likelihood; targets are the next-token
// shifted ids.
Tensor stage2_loss(const Tensor& logits, const std::vector<int>& targets);

// Linear warmup from 0 to peak, then cosine decay to min_lr_factor * peak
// at the final step.
double lr_at(std::size_t step, std::size_t total_steps, double peak,
             double warmup_fraction, double min_lr_factor);

class AdamW {
 public:
  AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8);

  // Clips by global gradient norm first (threshold `clip`, disabled when
  // <= 0), then applies decoupled-weight-decay Adam with bias correction.
  // Missing gradients count as zero. Returns the pre-clip global norm.
  double step(std::vector<Tensor>& params, double lr, double clip);

  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, weight_decay_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StageRecord {
  int stage = 0;
  std::size_t step = 0;
  std::uint64_t tokens = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_ppl;
};

struct StageMetrics {
  std::vector<StageRecord> records;
  std::vector<double> final_per_layer_loss;  // stage 1 only
  double final_loss = 0.0;
  std::optional<double> final_val_ppl;
  std::uint64_t tokens_consumed = 0;
};

// Append-only key=value metrics log, one record per line.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& os) : os_(&os) {}
  void write(const StageRecord& r);

 private:
  std::ostream* os_;
};

struct TrainOptions {
  std::size_t log_interval = 25;
  std::size_t eval_interval = 0;  // 0: only at the end (stage 2)
  std::size_t val_windows = 64;
  MatchPoint match_point = MatchPoint::block;
  MetricsWriter* writer = nullptr;
};

// Stage 1: teacher runs without gradients; only the student's Hedgehog
// feature maps train. Throws if any frozen parameter drifts.
StageMetrics run_stage1(const model::Model& teacher, model::Model& student,
                        const data::Corpus& corpus, const DistillPlan& plan,
                        const TrainOptions& opts);

// Stage 2: cross-entropy fine-tuning under the trainability mask
// (embeddings frozen by default). Throws if any frozen parameter drifts.
StageMetrics run_stage2(model::Model& student, const data::Corpus& corpus,
                        const DistillPlan& plan, const TrainMask& mask,
                        const TrainOptions& opts);

}  // namespace hm::distill
