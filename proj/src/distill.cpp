#include "hm/distill.hpp"

#include <cmath>
#include <cstdio>

namespace hm::distill {

// ---- plan arithmetic ----

std::size_t DistillPlan::total_steps() const {
  const double steps = static_cast<double>(total_tokens) /
                       static_cast<double>(tokens_per_step());
  return static_cast<std::size_t>(std::llround(steps));
}

std::size_t DistillPlan::s1_steps() const {
  return static_cast<std::size_t>(
      std::floor(static_cast<double>(total_steps()) * split_s1_percent /
                 100.0));
}

void DistillPlan::validate() const {
  if (split_s1_percent < 0.0 || split_s1_percent > 100.0) {
    throw std::invalid_argument("split_s1_percent must be in [0, 100]");
  }
  if (batch_size == 0 || seq_len == 0) {
    throw std::invalid_argument("batch_size and seq_len must be >= 1");
  }
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
    throw std::invalid_argument("warmup_fraction must be in [0, 1]");
  }
}

bool TrainMask::trainable(const std::string& name) const {
  if (name == "embed") return embed;
  if (name == "unembed") return unembed;
  if (name.find(".mixer.") != std::string::npos) return mixer;
  if (name.find(".mlp.") != std::string::npos) return mlp;
  // layer norms (per-block and final)
  return norms;
}

// ---- losses ----

Tensor cosine_match_loss(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape() || student.ndim() != 2) {
    throw ShapeError("cosine_match_loss: expects matching [L, d] tensors");
  }
  const std::size_t L = student.dim(0), d = student.dim(1);
  double total = 0.0;
  // row data saved for the adjoint
  std::vector<double> cosines(L), s_norms(L), t_norms(L);
  const auto& sv = student.data();
  const auto& tv = teacher.data();
  for (std::size_t i = 0; i < L; ++i) {
    const double* s = sv.data() + i * d;
    const double* t = tv.data() + i * d;
    double dot = 0.0, ss = 0.0, tt = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += s[j] * t[j];
      ss += s[j] * s[j];
      tt += t[j] * t[j];
    }
    const double ns = std::sqrt(ss), nt = std::sqrt(tt);
    s_norms[i] = ns;
    t_norms[i] = nt;
    if (ns == 0.0 || nt == 0.0) {
      cosines[i] = 0.0;  // zero-norm rows contribute loss 1, zero gradient
    } else {
      cosines[i] = dot / (ns * nt);
    }
    total += 1.0 - cosines[i];
  }
  opcount::add(3 * L * d);
  Tensor out = Tensor::scalar(total / static_cast<double>(L));
  if (!std::isfinite(out.item())) {
    throw NumericError("cosine_match_loss: non-finite loss");
  }
  if (grad_enabled() && (student.requires_grad() || teacher.requires_grad())) {
    Tensor sc = student, tc = teacher;
    out.set_requires_grad(true);
    Tape::active()->record([sc, tc, out, cosines = std::move(cosines),
                            s_norms = std::move(s_norms),
                            t_norms = std::move(t_norms), L, d]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const double g = (*og)[0] / static_cast<double>(L);
      const auto& sv2 = sc.data();
      const auto& tv2 = tc.data();
      for (std::size_t i = 0; i < L; ++i) {
        const double ns = s_norms[i], nt = t_norms[i];
        if (ns == 0.0 || nt == 0.0) continue;
        const double* s = sv2.data() + i * d;
        const double* t = tv2.data() + i * d;
        const double c = cosines[i];
        if (sc.requires_grad()) {
          auto& sg = sc.grad();
          for (std::size_t j = 0; j < d; ++j) {
            // d(1-c)/ds = -(t/(ns*nt) - c*s/ns^2)
            sg[i * d + j] += -g * (t[j] / (ns * nt) - c * s[j] / (ns * ns));
          }
        }
        if (tc.requires_grad()) {
          auto& tg = tc.grad();
          for (std::size_t j = 0; j < d; ++j) {
            tg[i * d + j] += -g * (s[j] / (ns * nt) - c * t[j] / (nt * nt));
          }
        }
      }
    });
  }
  return out;
}

Tensor stage1_loss(const std::vector<Tensor>& teacher_outputs,
                   const std::vector<Tensor>& student_outputs) {
  if (teacher_outputs.size() != student_outputs.size() ||
      teacher_outputs.empty()) {
    throw ShapeError("stage1_loss: layer count mismatch");
  }
  Tensor acc = cosine_match_loss(student_outputs[0], teacher_outputs[0]);
  for (std::size_t l = 1; l < teacher_outputs.size(); ++l) {
    acc = add(acc, cosine_match_loss(student_outputs[l], teacher_outputs[l]));
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(teacher_outputs.size()));
}

Tensor stage2_loss(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("stage2_loss: logits [L, V] vs targets length mismatch");
  }
  const std::size_t L = logits.dim(0), V = logits.dim(1);
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw ShapeError("stage2_loss: target id out of range");
    }
  }
  const auto& zv = logits.data();
  // softmax rows saved for the adjoint
  auto probs = std::make_shared<std::vector<double>>(L * V);
  double nll = 0.0;
  for (std::size_t i = 0; i < L; ++i) {
    const double* z = zv.data() + i * V;
    double mx = z[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, z[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      const double e = std::exp(z[j] - mx);
      (*probs)[i * V + j] = e;
      se += e;
    }
    const double inv = 1.0 / se;
    for (std::size_t j = 0; j < V; ++j) (*probs)[i * V + j] *= inv;
    nll += std::log(se) + mx - z[static_cast<std::size_t>(targets[i])];
  }
  opcount::add(3 * L * V);
  Tensor out = Tensor::scalar(nll / static_cast<double>(L));
  if (!std::isfinite(out.item())) {
    throw NumericError("stage2_loss: non-finite loss");
  }
  if (grad_enabled() && logits.requires_grad()) {
    Tensor lc = logits;
    std::vector<int> tg = targets;
    out.set_requires_grad(true);
    Tape::active()->record([lc, out, probs, tg, L, V]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const double g = (*og)[0] / static_cast<double>(L);
      auto& lg = lc.grad();
      for (std::size_t i = 0; i < L; ++i) {
        const double* p = probs->data() + i * V;
        double* grow = lg.data() + i * V;
        for (std::size_t j = 0; j < V; ++j) grow[j] += g * p[j];
        grow[static_cast<std::size_t>(tg[i])] -= g;
      }
    });
  }
  return out;
}

// ---- schedule ----

double lr_at(std::size_t step, std::size_t total_steps, double peak,
             double warmup_fraction, double min_lr_factor) {
  if (total_steps == 0) throw std::invalid_argument("lr_at: total_steps 0");
  if (step >= total_steps) throw std::invalid_argument("lr_at: step past end");
  const auto warmup = static_cast<std::size_t>(
      std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double lr_min = min_lr_factor * peak;
  const std::size_t last = total_steps - 1;
  if (last <= warmup) return peak;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(last - warmup);
  return lr_min + (peak - lr_min) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---- optimizer ----

AdamW::AdamW(double beta1, double beta2, double weight_decay, double eps)
    : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

double AdamW::step(std::vector<Tensor>& params, double lr, double clip) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0);
      v_[i].assign(params[i].numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) {
    throw std::logic_error("AdamW::step: parameter list changed size");
  }
  double sq = 0.0;
  for (auto& p : params) {
    const auto* g = p.grad_if();
    if (!g) continue;
    for (double x : *g) {
      if (!std::isfinite(x)) throw NumericError("AdamW: non-finite gradient");
      sq += x * x;
    }
  }
  const double norm = std::sqrt(sq);
  const double scale = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& pv = p.data();
    const auto* g = p.grad_if();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < pv.size(); ++j) {
      const double gj = g ? (*g)[j] * scale : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      pv[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * pv[j]);
    }
  }
  return norm;
}

// ---- metrics ----

void MetricsWriter::write(const StageRecord& r) {
  char buf[192];
  int n = std::snprintf(buf, sizeof(buf),
                        "stage=%d step=%zu tokens=%llu loss=%.8f lr=%.8g",
                        r.stage, r.step,
                        static_cast<unsigned long long>(r.tokens), r.loss,
                        r.lr);
  (*os_) << std::string(buf, static_cast<std::size_t>(n));
  if (r.val_ppl) {
    std::snprintf(buf, sizeof(buf), " val_ppl=%.6f", *r.val_ppl);
    (*os_) << buf;
  }
  (*os_) << "\n";
  os_->flush();
}

// ---- training loops ----

namespace {

struct ParamSnapshot {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
};

ParamSnapshot snapshot_frozen(const std::vector<model::NamedParam>& params) {
  ParamSnapshot snap;
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) {
      snap.names.push_back(p.name);
      snap.values.push_back(p.tensor.data());
    }
  }
  return snap;
}

void verify_frozen(const std::vector<model::NamedParam>& params,
                   const ParamSnapshot& snap, const char* stage) {
  std::size_t k = 0;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) continue;
    if (p.name != snap.names[k] || p.tensor.data() != snap.values[k]) {
      throw std::logic_error(std::string(stage) +
                             ": frozen parameter drifted: " + p.name);
    }
    ++k;
  }
}

std::vector<Tensor> trainable_tensors(
    const std::vector<model::NamedParam>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

// Seeds for the two stages are derived so their batch streams differ.
std::uint64_t stage_seed(std::uint64_t base, int stage) {
  return base * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(stage);
}

}  // namespace

StageMetrics run_stage1(const model::Model& teacher, model::Model& student,
                        const data::Corpus& corpus, const DistillPlan& plan,
                        const TrainOptions& opts) {
  plan.validate();
  if (student.cfg.mixer_kind != model::MixerKind::hedgehog) {
    throw std::invalid_argument("run_stage1: student must use hedgehog mixers");
  }
  if (teacher.cfg.n_layers != student.cfg.n_layers) {
    throw std::invalid_argument("run_stage1: layer count mismatch");
  }

  // only the hedgehog feature maps are trainable in stage 1
  auto params = named_params(student);
  for (auto& p : params) {
    const bool is_hh = p.name.find(".mixer.hhq.") != std::string::npos ||
                       p.name.find(".mixer.hhk.") != std::string::npos;
    p.tensor.set_requires_grad(is_hh);
  }
  const auto frozen = snapshot_frozen(params);
  const auto teacher_snap = snapshot_frozen(named_params(teacher));
  auto trainables = trainable_tensors(params);
  AdamW opt(plan.beta1, plan.beta2, plan.weight_decay);

  const std::size_t steps = plan.s1_steps();
  data::BatchSampler sampler(corpus, plan.seq_len, plan.batch_size,
                             stage_seed(plan.seed, 1));
  StageMetrics metrics;
  const std::size_t n_layers = student.cfg.n_layers;
  std::vector<double> layer_losses(n_layers, 0.0);
  double last_loss = 0.0;

  for (std::size_t step = 0; step < steps; ++step) {
    const double lr =
        lr_at(step, steps, plan.peak_lr_s1, plan.warmup_fraction,
              plan.min_lr_factor);
    zero_grads(trainables);
    data::Batch batch = sampler.next();
    double loss_sum = 0.0;
    std::fill(layer_losses.begin(), layer_losses.end(), 0.0);
    for (std::size_t i = 0; i < plan.batch_size; ++i) {
      model::ForwardTrace tt;
      {
        NoGrad ng;
        tt = model::lm_forward(teacher, batch.inputs[i], true);
      }
      Tape tape;
      auto st = model::lm_forward(student, batch.inputs[i], true);
      const auto& t_outs = (opts.match_point == MatchPoint::block)
                               ? tt.block_outputs
                               : tt.mixer_outputs;
      const auto& s_outs = (opts.match_point == MatchPoint::block)
                               ? st.block_outputs
                               : st.mixer_outputs;
      for (std::size_t l = 0; l < n_layers; ++l) {
        NoGrad ng;
        layer_losses[l] += cosine_match_loss(s_outs[l], t_outs[l]).item() /
                           static_cast<double>(plan.batch_size);
      }
      Tensor loss = stage1_loss(t_outs, s_outs);
      loss_sum += loss.item();
      tape.backward(mul_scalar(loss, 1.0 / static_cast<double>(plan.batch_size)));
    }
    opt.step(trainables, lr, plan.grad_clip);
    last_loss = loss_sum / static_cast<double>(plan.batch_size);

    metrics.tokens_consumed += plan.tokens_per_step();
    if ((opts.log_interval > 0 && (step + 1) % opts.log_interval == 0) ||
        step + 1 == steps) {
      StageRecord rec{1, step + 1, metrics.tokens_consumed, last_loss, lr, {}};
      metrics.records.push_back(rec);
      if (opts.writer) opts.writer->write(rec);
    }
  }
  metrics.final_loss = last_loss;
  metrics.final_per_layer_loss = layer_losses;

  verify_frozen(params, frozen, "stage 1");
  verify_frozen(named_params(teacher), teacher_snap, "stage 1 (teacher)");
  return metrics;
}

StageMetrics run_stage2(model::Model& student, const data::Corpus& corpus,
                        const DistillPlan& plan, const TrainMask& mask,
                        const TrainOptions& opts) {
  plan.validate();
  auto params = named_params(student);
  for (auto& p : params) p.tensor.set_requires_grad(mask.trainable(p.name));
  const auto frozen = snapshot_frozen(params);
  auto trainables = trainable_tensors(params);
  AdamW opt(plan.beta1, plan.beta2, plan.weight_decay);

  const std::size_t steps = plan.s2_steps();
  StageMetrics metrics;

  if (steps == 0) {
    metrics.final_val_ppl =
        data::perplexity(student, corpus, plan.seq_len, opts.val_windows);
    metrics.final_loss = std::log(*metrics.final_val_ppl);
    StageRecord rec{2, 0, 0, metrics.final_loss, 0.0, metrics.final_val_ppl};
    metrics.records.push_back(rec);
    if (opts.writer) opts.writer->write(rec);
    return metrics;
  }

  data::BatchSampler sampler(corpus, plan.seq_len, plan.batch_size,
                             stage_seed(plan.seed, 2));
  double last_loss = 0.0;
  for (std::size_t step = 0; step < steps; ++step) {
    const double lr =
        lr_at(step, steps, plan.peak_lr_s2, plan.warmup_fraction,
              plan.min_lr_factor);
    zero_grads(trainables);
    data::Batch batch = sampler.next();
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < plan.batch_size; ++i) {
      Tape tape;
      auto trace = model::lm_forward(student, batch.inputs[i]);
      Tensor loss = stage2_loss(trace.logits, batch.targets[i]);
      loss_sum += loss.item();
      tape.backward(mul_scalar(loss, 1.0 / static_cast<double>(plan.batch_size)));
    }
    opt.step(trainables, lr, plan.grad_clip);
    last_loss = loss_sum / static_cast<double>(plan.batch_size);

    metrics.tokens_consumed += plan.tokens_per_step();
    const bool log_now =
        (opts.log_interval > 0 && (step + 1) % opts.log_interval == 0) ||
        step + 1 == steps;
    const bool eval_now =
        (opts.eval_interval > 0 && (step + 1) % opts.eval_interval == 0) ||
        step + 1 == steps;
    if (log_now || eval_now) {
      StageRecord rec{2, step + 1, metrics.tokens_consumed, last_loss, lr, {}};
      if (eval_now) {
        rec.val_ppl =
            data::perplexity(student, corpus, plan.seq_len, opts.val_windows);
      }
      metrics.records.push_back(rec);
      if (opts.writer) opts.writer->write(rec);
    }
  }
  metrics.final_loss = last_loss;
  metrics.final_val_ppl =
      data::perplexity(student, corpus, plan.seq_len, opts.val_windows);

  verify_frozen(params, frozen, "stage 2");
  return metrics;
}

}  // namespace hm::distill
