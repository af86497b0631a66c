#include "hm/bridge.hpp"

#include <cassert>
#include <cmath>

namespace hm::bridge {

double softplus_inverse_one() { return std::log(std::exp(1.0) - 1.0); }

double silu_inverse_one() {
  // z * sigmoid(z) is strictly increasing on [1, 2] and brackets 1
  auto f = [](double z) { return z / (1.0 + std::exp(-z)) - 1.0; };
  double lo = 1.0, hi = 2.0;
  assert(f(lo) < 0.0 && f(hi) > 0.0);
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

StateIdentity init_state_identity(std::size_t state_size,
                                  std::size_t head_dim, std::size_t delta_rank,
                                  std::size_t n_heads) {
  StateIdentity st;
  st.lambda = Tensor::zeros({state_size, head_dim}, true);
  st.dt_wu = Tensor::zeros({delta_rank, n_heads}, true);
  st.dt_bu = Tensor::full({n_heads}, softplus_inverse_one(), true);
  return st;
}

ConvIdentity init_conv_identity(std::size_t kappa, std::size_t d) {
  if (kappa == 0) throw std::invalid_argument("init_conv_identity: kappa >= 1");
  ConvIdentity cv;
  cv.weight = Tensor::zeros({kappa, d}, true);
  for (std::size_t c = 0; c < d; ++c) {
    cv.weight.data()[(kappa - 1) * d + c] = 1.0;
  }
  cv.bias = Tensor::zeros({d}, true);
  return cv;
}

GateIdentity init_gate_identity(std::size_t d) {
  GateIdentity gt;
  gt.weight = Tensor::zeros({d, d}, true);
  gt.bias = Tensor::full({d}, silu_inverse_one(), true);
  return gt;
}

void substitute_linear_attention(model::MixerParams& mp,
                                 const model::ModelConfig& cfg, Rng& rng) {
  if (mp.hq_w.empty() || mp.hk_w.empty()) {
    throw std::invalid_argument(
        "substitute_linear_attention: source mixer has no hedgehog maps");
  }
  const std::size_t d = cfg.d_model;
  if (cfg.components.ssm_decay) {
    auto st = init_state_identity(cfg.state_size(), cfg.head_dim(),
                                  cfg.delta_rank, cfg.n_heads);
    mp.lambda = st.lambda;
    mp.dt_wu = st.dt_wu;
    mp.dt_bu = st.dt_bu;
    // dt_wd stays random: with dt_wu = 0 it has no effect on the output,
    // but it must be nonzero for dt_wu to receive gradient in stage 2
    mp.dt_wd = rng.normal_tensor({d, cfg.delta_rank}, 0.0,
                                 1.0 / std::sqrt(static_cast<double>(d)), true);
    mp.dt_bd = Tensor::zeros({cfg.delta_rank}, true);
  }
  if (cfg.components.conv) {
    auto cv = init_conv_identity(cfg.conv_kernel, d);
    mp.conv_w = cv.weight;
    mp.conv_b = cv.bias;
  }
  if (cfg.components.gate) {
    auto gt = init_gate_identity(d);
    mp.gate_w = gt.weight;
    mp.gate_b = gt.bias;
  }
}

double IdentityInitReport::max_dev() const {
  double m = state_decay_dev;
  m = std::max(m, delta_dev);
  m = std::max(m, conv_dev);
  m = std::max(m, gate_dev);
  return m;
}

IdentityInitReport verify_identity_init(const model::ModelConfig& cfg,
                                        std::uint64_t probe_seed) {
  IdentityInitReport rep;
  Rng rng(probe_seed);
  const std::size_t L = 7;
  const std::size_t d = cfg.d_model;
  Tensor x = rng.normal_tensor({L, d}, 0.0, 1.0);

  {
    auto st = init_state_identity(cfg.state_size(), cfg.head_dim(),
                                  cfg.delta_rank, cfg.n_heads);
    Tensor dt_wd = rng.normal_tensor({d, cfg.delta_rank}, 0.0, 0.3);
    Tensor hid = add_rowvec(matmul(x, dt_wd), Tensor::zeros({cfg.delta_rank}));
    Tensor delta = softplus(add_rowvec(matmul(hid, st.dt_wu), st.dt_bu));
    for (double v : delta.data()) {
      rep.delta_dev = std::max(rep.delta_dev, std::fabs(v - 1.0));
    }
    Tensor dcol = slice(delta, 1, 0, 1);
    Tensor lam = mixers::decay_from_rate(st.lambda, dcol);
    for (double v : lam.data()) {
      rep.state_decay_dev = std::max(rep.state_decay_dev, std::fabs(v - 1.0));
    }
  }
  {
    auto cv = init_conv_identity(cfg.conv_kernel, d);
    Tensor y = conv1d_causal(x, cv.weight, cv.bias);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      rep.conv_dev =
          std::max(rep.conv_dev, std::fabs(y.data()[i] - x.data()[i]));
    }
  }
  {
    auto gt = init_gate_identity(d);
    Tensor g = silu(add_rowvec(matmul(x, gt.weight), gt.bias));
    for (double v : g.data()) {
      rep.gate_dev = std::max(rep.gate_dev, std::fabs(v - 1.0));
    }
  }
  return rep;
}

}  // namespace hm::bridge
