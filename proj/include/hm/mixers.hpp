#pragma once

// Sequence mixers: softmax attention, Hedgehog linear attention, the SSM
// selective scan, and the HedgeMamba hybrid. All pure functions of
// (inputs, parameters); gradients flow through every path when a tape is
// active.

#include <cstddef>
#include <utility>
#include <vector>

#include "hm/tensor.hpp"

namespace hm::mixers {

struct AttentionParams {
  Tensor wq, bq;  // [d,d], [d]
  Tensor wk, bk;
  Tensor wv, bv;
  std::size_t num_heads = 1;
  double rotary_fraction = 0.0;
};

// One learnable feature map: phi(x) = softmax(concat[Wx+b, -(Wx+b)]).
// One (w, b) pair per head; w is [head_dim, head_dim], b is [head_dim].
struct HedgehogParams {
  std::vector<Tensor> w;
  std::vector<Tensor> b;
};

struct SsmParams {
  Tensor lambda;                        // decay rates, [N, head_dim]
  Tensor dt_wd, dt_bd, dt_wu, dt_bu;    // delta MLP: d->d_r, d_r->num_heads
  Tensor conv_w, conv_b;                // [kappa, d], [d]
  Tensor gate_w, gate_b;                // [d,d], [d]
  Tensor wv, bv;                        // value map carried from attention
};

struct ComponentFlags {
  bool ssm_decay = true;
  bool conv = true;
  bool gate = true;
};

// Floor applied to score-normalization denominators. Hedgehog features are
// a softmax, so a true underflow here indicates a bug; with debug checks
// enabled it raises NumericError instead of clamping silently.
inline constexpr double kNormalizerFloor = 1e-9;

std::size_t rotary_dims(std::size_t head_dim, double rotary_fraction);

// y = softmax(q k^T * scale, causal-masked) v for one head.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                      bool causal, double scale);

// Causal linear attention in O(L) via running prefix sums of
// phi(K)^T V (and phi(K)^T 1 when normalizing).
Tensor linear_attention_core(const Tensor& phi_q, const Tensor& phi_k,
                             const Tensor& v, bool normalize);

// Unnormalized numerator of the causal linear-attention form:
// y_l = phi_q_l^T (sum_{j<=l} phi_k_j v_j^T). O(L) primitive.
Tensor causal_dot_prefix(const Tensor& phi_q, const Tensor& phi_k,
                         const Tensor& v);

// out[l,n,c] = exp(-lambda[n,c] * delta[l])
Tensor decay_from_rate(const Tensor& lambda, const Tensor& delta);

Tensor clamp_min(const Tensor& a, double lo);

// Multi-head softmax attention (Eq.-1 style), heads concatenated, no output
// projection. Rotary is applied to the raw per-head q/k.
Tensor softmax_attention(const Tensor& x, const AttentionParams& p,
                         bool causal);

// phi(x) rows: [L, head_dim] -> [L, 2*head_dim]; strictly positive entries
// summing to 1 per row.
Tensor hedgehog_map(const Tensor& x, const Tensor& w, const Tensor& b);

// Multi-head Hedgehog linear attention, heads concatenated, no output
// projection. Feature map first, then rotary, per head.
Tensor linear_attention(const Tensor& x, const AttentionParams& p,
                        const HedgehogParams& hq, const HedgehogParams& hk,
                        bool causal, bool normalize);

// Selective-scan recurrence:
//   h_l = lam_l (.) h_{l-1} + b_l (x) x_l,   y_l = c_l^T h_l,   h_0 = 0.
// Shapes: lam [L,N,dh], b [L,N], c [L,N], x [L,dh] -> y [L,dh].
Tensor ssm_scan(const Tensor& lam, const Tensor& b, const Tensor& c,
                const Tensor& x);

// Materialized Eq.-3 form of the same recurrence; O(L^2) reference path,
// forward only (no tape participation).
Tensor ssm_unrolled(const Tensor& lam, const Tensor& b, const Tensor& c,
                    const Tensor& x);

// State expansion for score normalization: V -> concat[V; 1] and
// lam -> concat[lam; lam] along the channel axis, so that a single scan
// yields the output in the first dh channels and the normalizer in the
// last dh.
std::pair<Tensor, Tensor> expand_for_normalization(const Tensor& v,
                                                   const Tensor& lam);

// Full HedgeMamba mixer: gate branch, causal conv, q/k/v projections,
// Hedgehog features with rotary, delta/decay discretization, normalized
// selective scan, gate multiply, output projection. Disabled components are
// skipped entirely and behave as the identity.
Tensor hedgemamba_forward(const Tensor& x, const AttentionParams& ap,
                          const HedgehogParams& hq, const HedgehogParams& hk,
                          const SsmParams& sp, const Tensor& out_w,
                          const Tensor& out_b, ComponentFlags flags);

}  // namespace hm::mixers
