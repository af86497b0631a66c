#pragma once

// Stage-2 initialization: the linear-attention -> Mamba parameter
// substitutions plus the identity initializations that make a HedgeMamba
// mixer reproduce its Hedgehog source at step 0. The decay/delta path, the
// causal convolution and the gate branch all start as exact no-ops.

#include <cstdint>

#include "hm/model.hpp"
#include "hm/tensor.hpp"

namespace hm::bridge {

// softplus^-1(1) = ln(e - 1), in closed form.
double softplus_inverse_one();

// silu^-1(1), found by bisection of z * sigmoid(z) = 1 on [1, 2] to 1e-12.
double silu_inverse_one();

struct StateIdentity {
  Tensor lambda;  // [N, head_dim], all zero -> decay exp(0) = 1
  Tensor dt_wu;   // [d_r, n_heads], all zero
  Tensor dt_bu;   // [n_heads], softplus^-1(1) -> delta = 1
};

StateIdentity init_state_identity(std::size_t state_size,
                                  std::size_t head_dim, std::size_t delta_rank,
                                  std::size_t n_heads);

struct ConvIdentity {
  Tensor weight;  // [kappa, d]: last tap 1, others 0
  Tensor bias;    // [d], zero
};

ConvIdentity init_conv_identity(std::size_t kappa, std::size_t d);

struct GateIdentity {
  Tensor weight;  // [d, d], zero
  Tensor bias;    // [d], silu^-1(1) -> gate = 1
};

GateIdentity init_gate_identity(std::size_t d);

// Fills the SSM/conv/gate fields of a Hedgehog mixer bundle in place, per
// the component flags in cfg. The q/k/v maps and the Hedgehog feature maps
// already in the bundle become the C-path, B-path and value map unchanged.
// The delta down-projection is drawn from rng (see StateIdentity).
void substitute_linear_attention(model::MixerParams& mp,
                                 const model::ModelConfig& cfg, Rng& rng);

// Max deviation of each identity-initialized component from the identity
// on seeded probe inputs.
struct IdentityInitReport {
  double state_decay_dev = 0.0;  // max |Lambda - 1|
  double delta_dev = 0.0;        // max |delta - 1|
  double conv_dev = 0.0;         // max |conv(x) - x|
  double gate_dev = 0.0;         // max |silu(gate(x)) - 1|
  double max_dev() const;
};

IdentityInitReport verify_identity_init(const model::ModelConfig& cfg,
                                        std::uint64_t probe_seed);

}  // namespace hm::bridge
