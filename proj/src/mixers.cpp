#include "hm/mixers.hpp"

#include <cmath>
#include <memory>

namespace hm::mixers {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace

std::size_t rotary_dims(std::size_t head_dim, double rotary_fraction) {
  auto r = static_cast<std::size_t>(
      static_cast<double>(head_dim) * rotary_fraction);
  if (r % 2 != 0) --r;
  return r;
}

// ---- primitives ----

Tensor causal_dot_prefix(const Tensor& phi_q, const Tensor& phi_k,
                         const Tensor& v) {
  require(phi_q.ndim() == 2 && phi_k.ndim() == 2 && v.ndim() == 2,
          "causal_dot_prefix: expects 2-D inputs");
  require(phi_q.shape() == phi_k.shape() && phi_q.dim(0) == v.dim(0),
          "causal_dot_prefix: shape mismatch");
  const std::size_t L = phi_q.dim(0), F = phi_q.dim(1), dv = v.dim(1);
  Tensor out = Tensor::zeros({L, dv});
  {
    const double* Q = phi_q.data().data();
    const double* K = phi_k.data().data();
    const double* V = v.data().data();
    double* Y = out.data().data();
    std::vector<double> state(F * dv, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      const double* kr = K + l * F;
      const double* vr = V + l * dv;
      for (std::size_t f = 0; f < F; ++f) {
        const double kf = kr[f];
        double* srow = state.data() + f * dv;
        for (std::size_t d = 0; d < dv; ++d) srow[d] += kf * vr[d];
      }
      const double* qr = Q + l * F;
      double* yr = Y + l * dv;
      for (std::size_t f = 0; f < F; ++f) {
        const double qf = qr[f];
        const double* srow = state.data() + f * dv;
        for (std::size_t d = 0; d < dv; ++d) yr[d] += qf * srow[d];
      }
    }
  }
  opcount::add(2ull * L * F * dv);
  if (grad_enabled() &&
      (phi_q.requires_grad() || phi_k.requires_grad() || v.requires_grad())) {
    Tensor qc = phi_q, kc = phi_k, vc = v;
    out.set_requires_grad(true);
    Tape::active()->record([qc, kc, vc, out, L, F, dv]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const double* G = og->data();
      const double* Q = qc.data().data();
      const double* K = kc.data().data();
      const double* V = vc.data().data();
      if (qc.requires_grad()) {
        // replay the forward state to get S_l for each l
        std::vector<double> state(F * dv, 0.0);
        double* dQ = qc.grad().data();
        for (std::size_t l = 0; l < L; ++l) {
          const double* kr = K + l * F;
          const double* vr = V + l * dv;
          for (std::size_t f = 0; f < F; ++f) {
            const double kf = kr[f];
            double* srow = state.data() + f * dv;
            for (std::size_t d = 0; d < dv; ++d) srow[d] += kf * vr[d];
          }
          const double* gr = G + l * dv;
          double* dqr = dQ + l * F;
          for (std::size_t f = 0; f < F; ++f) {
            const double* srow = state.data() + f * dv;
            double s = 0.0;
            for (std::size_t d = 0; d < dv; ++d) s += gr[d] * srow[d];
            dqr[f] += s;
          }
        }
      }
      if (kc.requires_grad() || vc.requires_grad()) {
        // reverse sweep with R_l = sum_{m>=l} phi_q_m (x) dy_m
        std::vector<double> rstate(F * dv, 0.0);
        double* dK = kc.requires_grad() ? kc.grad().data() : nullptr;
        double* dV = vc.requires_grad() ? vc.grad().data() : nullptr;
        for (std::size_t l = L; l-- > 0;) {
          const double* qr = Q + l * F;
          const double* gr = G + l * dv;
          for (std::size_t f = 0; f < F; ++f) {
            const double qf = qr[f];
            double* rrow = rstate.data() + f * dv;
            for (std::size_t d = 0; d < dv; ++d) rrow[d] += qf * gr[d];
          }
          const double* kr = K + l * F;
          const double* vr = V + l * dv;
          for (std::size_t f = 0; f < F; ++f) {
            const double* rrow = rstate.data() + f * dv;
            if (dK) {
              double s = 0.0;
              for (std::size_t d = 0; d < dv; ++d) s += rrow[d] * vr[d];
              dK[l * F + f] += s;
            }
            if (dV) {
              const double kf = kr[f];
              double* dvr = dV + l * dv;
              for (std::size_t d = 0; d < dv; ++d) dvr[d] += rrow[d] * kf;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor decay_from_rate(const Tensor& lambda, const Tensor& delta) {
  require(lambda.ndim() == 2, "decay_from_rate: lambda must be [N, dh]");
  const std::size_t N = lambda.dim(0), dh = lambda.dim(1);
  const std::size_t L = delta.numel();
  Tensor out = Tensor::zeros({L, N, dh});
  {
    const double* lam = lambda.data().data();
    const double* del = delta.data().data();
    double* O = out.data().data();
    for (std::size_t l = 0; l < L; ++l) {
      const double dl = del[l];
      double* orow = O + l * N * dh;
      for (std::size_t i = 0; i < N * dh; ++i) orow[i] = std::exp(-lam[i] * dl);
    }
  }
  opcount::add(2ull * L * N * dh);
  {
    for (double x : out.data()) {
      if (!std::isfinite(x)) {
        throw NumericError("decay_from_rate: non-finite decay value");
      }
    }
  }
  if (grad_enabled() && (lambda.requires_grad() || delta.requires_grad())) {
    Tensor lc = lambda, dc = delta;
    out.set_requires_grad(true);
    Tape::active()->record([lc, dc, out, L, N, dh]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const double* G = og->data();
      const double* O = out.data().data();
      const double* lam = lc.data().data();
      const double* del = dc.data().data();
      if (lc.requires_grad()) {
        double* dlam = lc.grad().data();
        for (std::size_t l = 0; l < L; ++l) {
          const double dl = del[l];
          const double* grow = G + l * N * dh;
          const double* orow = O + l * N * dh;
          for (std::size_t i = 0; i < N * dh; ++i)
            dlam[i] += grow[i] * (-dl) * orow[i];
        }
      }
      if (dc.requires_grad()) {
        double* ddel = dc.grad().data();
        for (std::size_t l = 0; l < L; ++l) {
          const double* grow = G + l * N * dh;
          const double* orow = O + l * N * dh;
          double s = 0.0;
          for (std::size_t i = 0; i < N * dh; ++i)
            s += grow[i] * (-lam[i]) * orow[i];
          ddel[l] += s;
        }
      }
    });
  }
  return out;
}

Tensor clamp_min(const Tensor& a, double lo) {
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] < lo ? lo : av[i];
  if (grad_enabled() && a.requires_grad()) {
    Tensor ac = a;
    out.set_requires_grad(true);
    Tape::active()->record([ac, out, lo]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      const auto& av2 = ac.data();
      for (std::size_t i = 0; i < og->size(); ++i) {
        if (av2[i] >= lo) ag[i] += (*og)[i];
      }
    });
  }
  return out;
}

Tensor ssm_scan(const Tensor& lam, const Tensor& b, const Tensor& c,
                const Tensor& x) {
  require(lam.ndim() == 3 && b.ndim() == 2 && c.ndim() == 2 && x.ndim() == 2,
          "ssm_scan: bad ranks");
  const std::size_t L = lam.dim(0), N = lam.dim(1), dh = lam.dim(2);
  require(b.dim(0) == L && b.dim(1) == N && c.dim(0) == L && c.dim(1) == N &&
              x.dim(0) == L && x.dim(1) == dh,
          "ssm_scan: shape mismatch");
  Tensor out = Tensor::zeros({L, dh});
  // all hidden states are kept for the adjoint
  auto hstates = std::make_shared<std::vector<double>>(L * N * dh);
  {
    const double* LAM = lam.data().data();
    const double* B = b.data().data();
    const double* C = c.data().data();
    const double* X = x.data().data();
    double* Y = out.data().data();
    double* H = hstates->data();
    std::vector<double> h(N * dh, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      const double* lamr = LAM + l * N * dh;
      const double* br = B + l * N;
      const double* cr = C + l * N;
      const double* xr = X + l * dh;
      double* yr = Y + l * dh;
      for (std::size_t n = 0; n < N; ++n) {
        double* hrow = h.data() + n * dh;
        const double* lrow = lamr + n * dh;
        const double bn = br[n];
        const double cn = cr[n];
        for (std::size_t d = 0; d < dh; ++d) {
          hrow[d] = lrow[d] * hrow[d] + bn * xr[d];
          yr[d] += cn * hrow[d];
        }
      }
      std::copy(h.begin(), h.end(), H + l * N * dh);
    }
  }
  opcount::add(3ull * L * N * dh);
  for (double v : out.data()) {
    if (!std::isfinite(v)) throw NumericError("ssm_scan: non-finite output");
  }
  if (grad_enabled() && (lam.requires_grad() || b.requires_grad() ||
                         c.requires_grad() || x.requires_grad())) {
    Tensor lamc = lam, bc = b, cc = c, xc = x;
    out.set_requires_grad(true);
    Tape::active()->record([lamc, bc, cc, xc, out, hstates, L, N, dh]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const double* G = og->data();
      const double* LAM = lamc.data().data();
      const double* B = bc.data().data();
      const double* C = cc.data().data();
      const double* X = xc.data().data();
      const double* H = hstates->data();
      double* dLam = lamc.requires_grad() ? lamc.grad().data() : nullptr;
      double* dB = bc.requires_grad() ? bc.grad().data() : nullptr;
      double* dC = cc.requires_grad() ? cc.grad().data() : nullptr;
      double* dX = xc.requires_grad() ? xc.grad().data() : nullptr;
      std::vector<double> dh_acc(N * dh, 0.0);
      for (std::size_t l = L; l-- > 0;) {
        const double* gr = G + l * dh;
        const double* hr = H + l * N * dh;
        const double* hprev = (l == 0) ? nullptr : H + (l - 1) * N * dh;
        const double* lamr = LAM + l * N * dh;
        const double* br = B + l * N;
        const double* cr = C + l * N;
        const double* xr = X + l * dh;
        for (std::size_t n = 0; n < N; ++n) {
          double* acc = dh_acc.data() + n * dh;
          const double cn = cr[n];
          const double bn = br[n];
          const double* hrow = hr + n * dh;
          const double* hprow = hprev ? hprev + n * dh : nullptr;
          const double* lrow = lamr + n * dh;
          double s_c = 0.0, s_b = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            acc[d] += cn * gr[d];
            s_c += hrow[d] * gr[d];
            if (dLam) {
              dLam[(l * N + n) * dh + d] +=
                  acc[d] * (hprow ? hprow[d] : 0.0);
            }
            s_b += acc[d] * xr[d];
            if (dX) dX[l * dh + d] += acc[d] * bn;
            acc[d] *= lrow[d];
          }
          if (dC) dC[l * N + n] += s_c;
          if (dB) dB[l * N + n] += s_b;
        }
      }
    });
  }
  return out;
}

Tensor ssm_unrolled(const Tensor& lam, const Tensor& b, const Tensor& c,
                    const Tensor& x) {
  require(lam.ndim() == 3 && b.ndim() == 2 && c.ndim() == 2 && x.ndim() == 2,
          "ssm_unrolled: bad ranks");
  const std::size_t L = lam.dim(0), N = lam.dim(1), dh = lam.dim(2);
  require(b.dim(0) == L && b.dim(1) == N && c.dim(0) == L && c.dim(1) == N &&
              x.dim(0) == L && x.dim(1) == dh,
          "ssm_unrolled: shape mismatch");
  Tensor out = Tensor::zeros({L, dh});
  const double* LAM = lam.data().data();
  const double* B = b.data().data();
  const double* C = c.data().data();
  const double* X = x.data().data();
  double* Y = out.data().data();
  // P[n,d] accumulates prod_{k=j+1..i} lam_k as j walks down from i
  std::vector<double> prod(N * dh);
  for (std::size_t i = 0; i < L; ++i) {
    std::fill(prod.begin(), prod.end(), 1.0);
    const double* ci = C + i * N;
    double* yi = Y + i * dh;
    for (std::size_t jj = 0; jj <= i; ++jj) {
      const std::size_t j = i - jj;
      if (j < i) {
        const double* lamk = LAM + (j + 1) * N * dh;
        for (std::size_t t = 0; t < N * dh; ++t) prod[t] *= lamk[t];
      }
      const double* bj = B + j * N;
      const double* xj = X + j * dh;
      for (std::size_t d = 0; d < dh; ++d) {
        double a = 0.0;
        for (std::size_t n = 0; n < N; ++n) a += ci[n] * prod[n * dh + d] * bj[n];
        yi[d] += a * xj[d];
      }
    }
  }
  for (double v : out.data()) {
    if (!std::isfinite(v)) throw NumericError("ssm_unrolled: non-finite output");
  }
  return out;
}

std::pair<Tensor, Tensor> expand_for_normalization(const Tensor& v,
                                                   const Tensor& lam) {
  require(v.ndim() == 2 && lam.ndim() == 3 && lam.dim(0) == v.dim(0) &&
              lam.dim(2) == v.dim(1),
          "expand_for_normalization: shape mismatch");
  Tensor ones = Tensor::full(v.shape(), 1.0);
  Tensor v_exp = concat(v, ones, 1);
  Tensor lam_exp = concat(lam, lam, 2);
  return {v_exp, lam_exp};
}

// ---- composite mixers ----

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                      bool causal, double scale) {
  Tensor scores = mul_scalar(matmul(q, transpose(k)), scale);
  Tensor a = causal ? causal_softmax(scores) : softmax_last(scores);
  return matmul(a, v);
}

Tensor hedgehog_map(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor pre = add_rowvec(matmul(x, w), b);
  return softmax_last(concat(pre, neg(pre), 1));
}

namespace {

struct Projected {
  Tensor q, k, v;
};

Projected project_qkv(const Tensor& x, const AttentionParams& p) {
  require(x.ndim() == 2, "mixer: input must be [L, d]");
  require(x.dim(1) == p.wq.dim(0), "mixer: input dim does not match params");
  require(p.wq.dim(1) % p.num_heads == 0,
          "mixer: d must be divisible by num_heads");
  Projected r;
  r.q = add_rowvec(matmul(x, p.wq), p.bq);
  r.k = add_rowvec(matmul(x, p.wk), p.bk);
  r.v = add_rowvec(matmul(x, p.wv), p.bv);
  return r;
}

Tensor concat_heads(std::vector<Tensor> heads) {
  Tensor y = heads[0];
  for (std::size_t h = 1; h < heads.size(); ++h) y = concat(y, heads[h], 1);
  return y;
}

void check_normalizer(const Tensor& den) {
  if (!debug_checks()) return;
  for (double v : den.data()) {
    if (v < kNormalizerFloor) {
      throw NumericError(
          "linear attention: normalization denominator below 1e-9 "
          "(degenerate feature map)");
    }
  }
}

}  // namespace

Tensor softmax_attention(const Tensor& x, const AttentionParams& p,
                         bool causal) {
  const std::size_t d = x.dim(1);
  const std::size_t H = p.num_heads;
  Projected pr = project_qkv(x, p);
  const std::size_t dh = d / H;
  const std::size_t rot = rotary_dims(dh, p.rotary_fraction);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    Tensor qh = slice(pr.q, 1, h * dh, dh);
    Tensor kh = slice(pr.k, 1, h * dh, dh);
    Tensor vh = slice(pr.v, 1, h * dh, dh);
    if (rot > 0) {
      qh = rotary(qh, rot);
      kh = rotary(kh, rot);
    }
    outs.push_back(attention_core(qh, kh, vh, causal, scale));
  }
  return concat_heads(std::move(outs));
}

Tensor linear_attention_core(const Tensor& phi_q, const Tensor& phi_k,
                             const Tensor& v, bool normalize) {
  Tensor num = causal_dot_prefix(phi_q, phi_k, v);
  if (!normalize) return num;
  Tensor ones = Tensor::full({v.dim(0), 1}, 1.0);
  Tensor den = causal_dot_prefix(phi_q, phi_k, ones);
  check_normalizer(den);
  return div_colvec(num, clamp_min(den, kNormalizerFloor));
}

Tensor linear_attention(const Tensor& x, const AttentionParams& p,
                        const HedgehogParams& hq, const HedgehogParams& hk,
                        bool causal, bool normalize) {
  const std::size_t d = x.dim(1);
  const std::size_t H = p.num_heads;
  require(hq.w.size() == H && hk.w.size() == H,
          "linear_attention: one hedgehog map per head per role");
  Projected pr = project_qkv(x, p);
  const std::size_t dh = d / H;
  const std::size_t rot = rotary_dims(dh, p.rotary_fraction);
  std::vector<Tensor> outs;
  outs.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    Tensor qh = slice(pr.q, 1, h * dh, dh);
    Tensor kh = slice(pr.k, 1, h * dh, dh);
    Tensor vh = slice(pr.v, 1, h * dh, dh);
    Tensor phi_q = hedgehog_map(qh, hq.w[h], hq.b[h]);
    Tensor phi_k = hedgehog_map(kh, hk.w[h], hk.b[h]);
    if (rot > 0) {
      phi_q = rotary(phi_q, rot);
      phi_k = rotary(phi_k, rot);
    }
    if (causal) {
      outs.push_back(linear_attention_core(phi_q, phi_k, vh, normalize));
    } else {
      Tensor scores = matmul(phi_q, transpose(phi_k));
      Tensor num = matmul(scores, vh);
      if (normalize) {
        Tensor ones = Tensor::full({x.dim(0), 1}, 1.0);
        Tensor den = matmul(scores, ones);
        check_normalizer(den);
        num = div_colvec(num, clamp_min(den, kNormalizerFloor));
      }
      outs.push_back(num);
    }
  }
  return concat_heads(std::move(outs));
}

Tensor hedgemamba_forward(const Tensor& x, const AttentionParams& ap,
                          const HedgehogParams& hq, const HedgehogParams& hk,
                          const SsmParams& sp, const Tensor& out_w,
                          const Tensor& out_b, ComponentFlags flags) {
  const std::size_t L = x.dim(0), d = x.dim(1);
  const std::size_t H = ap.num_heads;
  const std::size_t dh = d / H;
  const std::size_t N = 2 * dh;  // state size = hedgehog feature dimension
  const std::size_t rot = rotary_dims(dh, ap.rotary_fraction);

  Tensor gate;
  if (flags.gate) {
    gate = silu(add_rowvec(matmul(x, sp.gate_w), sp.gate_b));
  }
  Tensor xc = flags.conv ? conv1d_causal(x, sp.conv_w, sp.conv_b) : x;

  Tensor q = add_rowvec(matmul(xc, ap.wq), ap.bq);  // C path
  Tensor k = add_rowvec(matmul(xc, ap.wk), ap.bk);  // B path
  Tensor v = add_rowvec(matmul(xc, sp.wv), sp.bv);

  Tensor delta;
  if (flags.ssm_decay) {
    require(sp.lambda.ndim() == 2 && sp.lambda.dim(0) == N &&
                sp.lambda.dim(1) == dh,
            "hedgemamba: lambda must be [2*head_dim, head_dim]");
    Tensor hid = add_rowvec(matmul(xc, sp.dt_wd), sp.dt_bd);
    Tensor raw = add_rowvec(matmul(hid, sp.dt_wu), sp.dt_bu);
    require(raw.dim(1) == H, "hedgemamba: delta must be one scalar per head");
    delta = softplus(raw);  // [L, H]
  }

  std::vector<Tensor> outs;
  outs.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    Tensor qh = slice(q, 1, h * dh, dh);
    Tensor kh = slice(k, 1, h * dh, dh);
    Tensor vh = slice(v, 1, h * dh, dh);
    Tensor phi_q = hedgehog_map(qh, hq.w[h], hq.b[h]);
    Tensor phi_k = hedgehog_map(kh, hk.w[h], hk.b[h]);
    if (rot > 0) {
      phi_q = rotary(phi_q, rot);
      phi_k = rotary(phi_k, rot);
    }
    Tensor lam_l;
    Tensor b_l = phi_k;
    if (flags.ssm_decay) {
      Tensor dcol = slice(delta, 1, h, 1);  // [L,1]
      // zero-order-hold: delta scales B as well as the decay
      b_l = mul_colvec(phi_k, dcol);
      lam_l = decay_from_rate(sp.lambda, dcol);
    } else {
      lam_l = Tensor::full({L, N, dh}, 1.0);
    }
    auto [v_exp, lam_exp] = expand_for_normalization(vh, lam_l);
    Tensor y2 = ssm_scan(lam_exp, b_l, phi_q, v_exp);  // [L, 2*dh]
    Tensor num = slice(y2, 1, 0, dh);
    Tensor den = slice(y2, 1, dh, dh);
    check_normalizer(den);
    outs.push_back(div(num, clamp_min(den, kNormalizerFloor)));
  }
  Tensor y = concat_heads(std::move(outs));
  if (flags.gate) y = mul(y, gate);
  return add_rowvec(matmul(y, out_w), out_b);
}

}  // namespace hm::mixers
