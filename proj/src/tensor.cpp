#include "hm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace hm {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->value.assign(shape_numel(t.impl_->shape), 0.0);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->value = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

double Tensor::item() const {
  if (!impl_ || impl_->value.size() != 1) {
    throw ShapeError("Tensor::item: tensor is not a single element");
  }
  return impl_->value[0];
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>* Tensor::grad_if() const {
  if (!impl_ || impl_->grad.empty()) return nullptr;
  return &impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->value = impl_->value;
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

// ---- Tape ----

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
thread_local unsigned long long g_multadds = 0;
}  // namespace

Tape::Tape() {
  if (g_active_tape != nullptr) {
    throw std::logic_error("Tape: another tape is already active on this thread");
  }
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = nullptr; }

Tape* Tape::active() {
  return g_grad_enabled ? g_active_tape : nullptr;
}

void Tape::record(std::function<void()> backward_fn) {
  ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) {
    throw std::logic_error("Tape::backward called twice without a fresh tape");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar tensor");
  }
  backward_done_ = true;
  Tensor l = loss;
  l.grad()[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) {
    throw std::logic_error("backward: no active tape");
  }
  g_active_tape->backward(loss);
}

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled && g_active_tape != nullptr; }

namespace {
thread_local bool g_debug_checks = false;
}

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }

namespace opcount {
unsigned long long multadds() { return g_multadds; }
void reset() { g_multadds = 0; }
void add(unsigned long long n) { g_multadds += n; }
}  // namespace opcount

// ---- Rng ----

std::uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
  // Marsaglia polar method with cached spare.
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  have_spare_ = true;
  return mean + stddev * u * m;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::logic_error("Rng::below(0)");
  // rejection sampling to avoid modulo bias
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

Tensor Rng::normal_tensor(Shape shape, double mean, double stddev,
                          bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& x : t.data()) x = normal(mean, stddev);
  return t;
}

// ---- op helpers ----

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (double x : t.data()) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

bool want_grad(const Tensor& a) { return grad_enabled() && a.requires_grad(); }

void mark_and_record(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(fn));
}

// Accumulates og into ag (same length).
void axpy_into(std::vector<double>& ag, const std::vector<double>& og) {
  for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
}

}  // namespace

// ---- elementwise binary ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  opcount::add(n);
  check_finite(out, "add");
  if (want_grad(a) || want_grad(b)) {
    Tensor ac = a, bc = b;
    mark_and_record(out, [ac, bc, out]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      if (ac.requires_grad()) axpy_into(ac.grad(), *og);
      if (bc.requires_grad()) axpy_into(bc.grad(), *og);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
  opcount::add(n);
  check_finite(out, "sub");
  if (want_grad(a) || want_grad(b)) {
    Tensor ac = a, bc = b;
    mark_and_record(out, [ac, bc, out]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      if (ac.requires_grad()) axpy_into(ac.grad(), *og);
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::size_t i = 0; i < og->size(); ++i) bg[i] -= (*og)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  opcount::add(n);
  check_finite(out, "mul");
  if (want_grad(a) || want_grad(b)) {
    Tensor ac = a, bc = b;
    mark_and_record(out, [ac, bc, out]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      if (ac.requires_grad()) {
        auto& ag = ac.grad();
        const auto& bv2 = bc.data();
        for (std::size_t i = 0; i < og->size(); ++i) ag[i] += (*og)[i] * bv2[i];
      }
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        const auto& av2 = ac.data();
        for (std::size_t i = 0; i < og->size(); ++i) bg[i] += (*og)[i] * av2[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i];
  opcount::add(n);
  check_finite(out, "div");
  if (want_grad(a) || want_grad(b)) {
    Tensor ac = a, bc = b;
    mark_and_record(out, [ac, bc, out]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const auto& av2 = ac.data();
      const auto& bv2 = bc.data();
      if (ac.requires_grad()) {
        auto& ag = ac.grad();
        for (std::size_t i = 0; i < og->size(); ++i) ag[i] += (*og)[i] / bv2[i];
      }
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::size_t i = 0; i < og->size(); ++i) {
          bg[i] -= (*og)[i] * av2[i] / (bv2[i] * bv2[i]);
        }
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + s;
  opcount::add(n);
  check_finite(out, "add_scalar");
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out]() mutable {
      const auto* og = out.grad_if();
      if (og) axpy_into(ac.grad(), *og);
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * s;
  opcount::add(n);
  check_finite(out, "mul_scalar");
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out, s]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      for (std::size_t i = 0; i < og->size(); ++i) ag[i] += (*og)[i] * s;
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---- matmul / transpose / broadcast helpers ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  opcount::add(m * k * n);
  check_finite(out, "matmul");
  if (want_grad(a) || want_grad(b)) {
    Tensor ac = a, bc = b;
    mark_and_record(out, [ac, bc, out, m, k, n]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const double* G = og->data();
      if (ac.requires_grad()) {
        // dA[i,p] += sum_j G[i,j] B[p,j]
        double* dA = ac.grad().data();
        const double* B2 = bc.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = G + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = B2 + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            dA[i * k + p] += s;
          }
        }
      }
      if (bc.requires_grad()) {
        // dB[p,j] += sum_i A[i,p] G[i,j]
        double* dB = bc.grad().data();
        const double* A2 = ac.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = G + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A2[i * k + p];
            if (av == 0.0) continue;
            double* brow = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expects a 2-D tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out, m, n]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ag[i * n + j] += (*og)[j * m + i];
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.numel() != m.dim(1)) {
    throw ShapeError("add_rowvec: " + shape_str(m.shape()) + " + " +
                     shape_str(v.shape()));
  }
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros(m.shape());
  const auto& mv = m.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = mv[i * c + j] + vv[j];
  opcount::add(r * c);
  check_finite(out, "add_rowvec");
  if (want_grad(m) || want_grad(v)) {
    Tensor mc = m, vc = v;
    mark_and_record(out, [mc, vc, out, r, c]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      if (mc.requires_grad()) axpy_into(mc.grad(), *og);
      if (vc.requires_grad()) {
        auto& vg = vc.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) vg[j] += (*og)[i * c + j];
      }
    });
  }
  return out;
}

Tensor mul_colvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.numel() != m.dim(0)) {
    throw ShapeError("mul_colvec: " + shape_str(m.shape()) + " * " +
                     shape_str(v.shape()));
  }
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros(m.shape());
  const auto& mv = m.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = mv[i * c + j] * vv[i];
  opcount::add(r * c);
  check_finite(out, "mul_colvec");
  if (want_grad(m) || want_grad(v)) {
    Tensor mc = m, vc = v;
    mark_and_record(out, [mc, vc, out, r, c]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      if (mc.requires_grad()) {
        auto& mg = mc.grad();
        const auto& vv2 = vc.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            mg[i * c + j] += (*og)[i * c + j] * vv2[i];
      }
      if (vc.requires_grad()) {
        auto& vg = vc.grad();
        const auto& mv2 = mc.data();
        for (std::size_t i = 0; i < r; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            s += (*og)[i * c + j] * mv2[i * c + j];
          vg[i] += s;
        }
      }
    });
  }
  return out;
}

Tensor div_colvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.numel() != m.dim(0)) {
    throw ShapeError("div_colvec: " + shape_str(m.shape()) + " / " +
                     shape_str(v.shape()));
  }
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros(m.shape());
  const auto& mv = m.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = mv[i * c + j] / vv[i];
  opcount::add(r * c);
  check_finite(out, "div_colvec");
  if (want_grad(m) || want_grad(v)) {
    Tensor mc = m, vc = v;
    mark_and_record(out, [mc, vc, out, r, c]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const auto& vv2 = vc.data();
      if (mc.requires_grad()) {
        auto& mg = mc.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            mg[i * c + j] += (*og)[i * c + j] / vv2[i];
      }
      if (vc.requires_grad()) {
        auto& vg = vc.grad();
        const auto& mv2 = mc.data();
        for (std::size_t i = 0; i < r; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            s += (*og)[i * c + j] * mv2[i * c + j];
          vg[i] -= s / (vv2[i] * vv2[i]);
        }
      }
    });
  }
  return out;
}

// ---- elementwise unary ----

namespace {

// y = f(x), dx += dy * dfdx(x, y)
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, const char* name, F f, DF dfdx) {
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i]);
  opcount::add(n);
  check_finite(out, name);
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out, dfdx]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      const auto& av2 = ac.data();
      const auto& ov2 = out.data();
      for (std::size_t i = 0; i < og->size(); ++i) {
        ag[i] += (*og)[i] * dfdx(av2[i], ov2[i]);
      }
    });
  }
  return out;
}

double sigmoid_scalar(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  // max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid", sigmoid_scalar,
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, "silu", [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a, "softplus", softplus_scalar,
      [](double x, double) { return sigmoid_scalar(x); });
}

Tensor gelu(const Tensor& a) {
  // exact erf form
  return unary_op(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

// ---- softmax ----

Tensor softmax_last(const Tensor& a) {
  if (a.ndim() == 0 || a.shape().back() == 0) {
    throw ShapeError("softmax_last: empty last axis");
  }
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.numel() / c;
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * c;
    double* y = ov.data() + r * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j) y[j] *= inv;
  }
  opcount::add(3 * rows * c);
  check_finite(out, "softmax_last");
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out, rows, c]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      const auto& ov2 = out.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = ov2.data() + r * c;
        const double* gy = og->data() + r * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
        double* gx = ag.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

Tensor causal_softmax(const Tensor& scores) {
  if (scores.ndim() != 2 || scores.dim(0) != scores.dim(1)) {
    throw ShapeError("causal_softmax: expects a square matrix, got " +
                     shape_str(scores.shape()));
  }
  const std::size_t L = scores.dim(0);
  Tensor out = Tensor::zeros(scores.shape());
  const auto& sv = scores.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < L; ++i) {
    const double* x = sv.data() + i * L;
    double* y = ov.data() + i * L;
    double mx = x[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j <= i; ++j) y[j] *= inv;
  }
  opcount::add(3 * (L * (L + 1)) / 2);
  check_finite(out, "causal_softmax");
  if (want_grad(scores)) {
    Tensor sc = scores;
    mark_and_record(out, [sc, out, L]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& sg = sc.grad();
      const auto& ov2 = out.data();
      for (std::size_t i = 0; i < L; ++i) {
        const double* y = ov2.data() + i * L;
        const double* gy = og->data() + i * L;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += gy[j] * y[j];
        double* gx = sg.data() + i * L;
        for (std::size_t j = 0; j <= i; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// ---- concat / slice ----

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.ndim() != b.ndim() || axis >= a.ndim()) {
    throw ShapeError("concat: rank mismatch or bad axis");
  }
  for (std::size_t i = 0; i < a.ndim(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " differ off axis " +
                       std::to_string(axis));
    }
  }
  Shape os = a.shape();
  os[axis] += b.dim(axis);
  Tensor out = Tensor::zeros(os);

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  const std::size_t wa = a.dim(axis) * inner;
  const std::size_t wb = b.dim(axis) * inner;
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(ov.data() + o * (wa + wb), av.data() + o * wa,
                wa * sizeof(double));
    std::memcpy(ov.data() + o * (wa + wb) + wa, bv.data() + o * wb,
                wb * sizeof(double));
  }
  if (want_grad(a) || want_grad(b)) {
    Tensor ac = a, bc = b;
    mark_and_record(out, [ac, bc, out, outer, wa, wb]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      if (ac.requires_grad()) {
        auto& ag = ac.grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < wa; ++i)
            ag[o * wa + i] += (*og)[o * (wa + wb) + i];
      }
      if (bc.requires_grad()) {
        auto& bg = bc.grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < wb; ++i)
            bg[o * wb + i] += (*og)[o * (wa + wb) + wa + i];
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len) {
  if (axis >= a.ndim() || start + len > a.dim(axis) || len == 0) {
    throw ShapeError("slice: bad range on " + shape_str(a.shape()));
  }
  Shape os = a.shape();
  os[axis] = len;
  Tensor out = Tensor::zeros(os);

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  const std::size_t wa = a.dim(axis) * inner;
  const std::size_t wo = len * inner;
  const std::size_t off = start * inner;
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(ov.data() + o * wo, av.data() + o * wa + off,
                wo * sizeof(double));
  }
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out, outer, wa, wo, off]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < wo; ++i)
          ag[o * wa + off + i] += (*og)[o * wo + i];
    });
  }
  return out;
}

// ---- reductions ----

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  opcount::add(a.numel());
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum_all");
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      for (double& g : ag) g += (*og)[0];
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor cumsum0(const Tensor& a) {
  if (a.ndim() == 0) throw ShapeError("cumsum0: scalar input");
  const std::size_t rows = a.dim(0);
  const std::size_t inner = a.numel() / rows;
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < inner; ++i) ov[i] = av[i];
  for (std::size_t r = 1; r < rows; ++r)
    for (std::size_t i = 0; i < inner; ++i)
      ov[r * inner + i] = ov[(r - 1) * inner + i] + av[r * inner + i];
  opcount::add(a.numel());
  check_finite(out, "cumsum0");
  if (want_grad(a)) {
    Tensor ac = a;
    mark_and_record(out, [ac, out, rows, inner]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& ag = ac.grad();
      // reverse prefix sums of the output gradient
      std::vector<double> acc(inner, 0.0);
      for (std::size_t r = rows; r-- > 0;) {
        for (std::size_t i = 0; i < inner; ++i) {
          acc[i] += (*og)[r * inner + i];
          ag[r * inner + i] += acc[i];
        }
      }
    });
  }
  return out;
}

// ---- structured ops ----

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " out of range for vocab " + std::to_string(v));
    }
  }
  const std::size_t L = ids.size();
  Tensor out = Tensor::zeros({L, d});
  const auto& tv = table.data();
  auto& ov = out.data();
  for (std::size_t l = 0; l < L; ++l) {
    std::memcpy(ov.data() + l * d,
                tv.data() + static_cast<std::size_t>(ids[l]) * d,
                d * sizeof(double));
  }
  if (want_grad(table)) {
    Tensor tc = table;
    std::vector<int> idc = ids;
    mark_and_record(out, [tc, out, idc, d]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& tg = tc.grad();
      for (std::size_t l = 0; l < idc.size(); ++l) {
        double* row = tg.data() + static_cast<std::size_t>(idc[l]) * d;
        const double* g = og->data() + l * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  if (x.ndim() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1)) {
    throw ShapeError("layernorm: bad shapes");
  }
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  // save normalized rows and inverse stddevs for the adjoint
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto rstd = std::make_shared<std::vector<double>>(r);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dlt = xr[j] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (xr[j] - mu) * rs;
      (*xhat)[i * c + j] = xh;
      ov[i * c + j] = gv[j] * xh + bv[j];
    }
  }
  opcount::add(5 * r * c);
  check_finite(out, "layernorm");
  if (want_grad(x) || want_grad(gamma) || want_grad(beta)) {
    Tensor xc = x, gc = gamma, bc = beta;
    mark_and_record(out, [xc, gc, bc, out, xhat, rstd, r, c]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const auto& gv2 = gc.data();
      for (std::size_t i = 0; i < r; ++i) {
        const double* gy = og->data() + i * c;
        const double* xh = xhat->data() + i * c;
        if (gc.requires_grad()) {
          auto& gg = gc.grad();
          for (std::size_t j = 0; j < c; ++j) gg[j] += gy[j] * xh[j];
        }
        if (bc.requires_grad()) {
          auto& bg = bc.grad();
          for (std::size_t j = 0; j < c; ++j) bg[j] += gy[j];
        }
        if (xc.requires_grad()) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double t = gy[j] * gv2[j];
            mean_g += t;
            mean_gx += t * xh[j];
          }
          mean_g /= static_cast<double>(c);
          mean_gx /= static_cast<double>(c);
          auto& xg = xc.grad();
          const double rs = (*rstd)[i];
          for (std::size_t j = 0; j < c; ++j) {
            const double t = gy[j] * gv2[j];
            xg[i * c + j] += rs * (t - mean_g - xh[j] * mean_gx);
          }
        }
      }
    });
  }
  return out;
}

Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || w.dim(1) != x.dim(1) ||
      b.numel() != x.dim(1) || w.dim(0) == 0) {
    throw ShapeError("conv1d_causal: bad shapes");
  }
  const std::size_t L = x.dim(0), d = x.dim(1), K = w.dim(0);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t l = 0; l < L; ++l) {
    double* yr = ov.data() + l * d;
    for (std::size_t c = 0; c < d; ++c) yr[c] = bv[c];
    for (std::size_t i = 0; i < K; ++i) {
      // tap i reads x[l - (K-1) + i]
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + i) -
                                 static_cast<std::ptrdiff_t>(K - 1);
      if (src < 0) continue;
      const double* xr = xv.data() + static_cast<std::size_t>(src) * d;
      const double* wr = wv.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) yr[c] += wr[c] * xr[c];
    }
  }
  opcount::add(L * d * K);
  check_finite(out, "conv1d_causal");
  if (want_grad(x) || want_grad(w) || want_grad(b)) {
    Tensor xc = x, wc = w, bc = b;
    mark_and_record(out, [xc, wc, bc, out, L, d, K]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      const auto& xv2 = xc.data();
      const auto& wv2 = wc.data();
      for (std::size_t l = 0; l < L; ++l) {
        const double* gy = og->data() + l * d;
        if (bc.requires_grad()) {
          auto& bg = bc.grad();
          for (std::size_t c = 0; c < d; ++c) bg[c] += gy[c];
        }
        for (std::size_t i = 0; i < K; ++i) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + i) -
                                     static_cast<std::ptrdiff_t>(K - 1);
          if (src < 0) continue;
          const std::size_t s = static_cast<std::size_t>(src);
          if (wc.requires_grad()) {
            auto& wg = wc.grad();
            for (std::size_t c = 0; c < d; ++c)
              wg[i * d + c] += gy[c] * xv2[s * d + c];
          }
          if (xc.requires_grad()) {
            auto& xg = xc.grad();
            for (std::size_t c = 0; c < d; ++c)
              xg[s * d + c] += gy[c] * wv2[i * d + c];
          }
        }
      }
    });
  }
  return out;
}

Tensor rotary(const Tensor& x, std::size_t rot_dims, double base) {
  if (x.ndim() != 2) throw ShapeError("rotary: expects [L, F]");
  if (rot_dims % 2 != 0 || rot_dims > x.dim(1)) {
    throw ShapeError("rotary: rot_dims must be even and fit in " +
                     shape_str(x.shape()));
  }
  const std::size_t L = x.dim(0), F = x.dim(1), half = rot_dims / 2;
  Tensor out = x.clone();
  out.set_requires_grad(false);
  auto cosv = std::make_shared<std::vector<double>>(L * half);
  auto sinv = std::make_shared<std::vector<double>>(L * half);
  for (std::size_t i = 0; i < half; ++i) {
    const double inv_freq =
        std::pow(base, -2.0 * static_cast<double>(i) /
                           static_cast<double>(rot_dims));
    for (std::size_t l = 0; l < L; ++l) {
      const double ang = static_cast<double>(l) * inv_freq;
      (*cosv)[l * half + i] = std::cos(ang);
      (*sinv)[l * half + i] = std::sin(ang);
    }
  }
  auto& ov = out.data();
  const auto& xv = x.data();
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t i = 0; i < half; ++i) {
      const double c = (*cosv)[l * half + i];
      const double s = (*sinv)[l * half + i];
      const double a = xv[l * F + i];
      const double b2 = xv[l * F + i + half];
      ov[l * F + i] = a * c - b2 * s;
      ov[l * F + i + half] = b2 * c + a * s;
    }
  }
  opcount::add(4 * L * half);
  check_finite(out, "rotary");
  if (want_grad(x)) {
    Tensor xc = x;
    mark_and_record(out, [xc, out, cosv, sinv, L, F, half]() mutable {
      const auto* og = out.grad_if();
      if (!og) return;
      auto& xg = xc.grad();
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t f = 0; f < F; ++f) {
          if (f >= 2 * half) {
            xg[l * F + f] += (*og)[l * F + f];
          }
        }
        for (std::size_t i = 0; i < half; ++i) {
          const double c = (*cosv)[l * half + i];
          const double s = (*sinv)[l * half + i];
          const double g1 = (*og)[l * F + i];
          const double g2 = (*og)[l * F + i + half];
          xg[l * F + i] += g1 * c + g2 * s;
          xg[l * F + i + half] += -g1 * s + g2 * c;
        }
      }
    });
  }
  return out;
}

// ---- grad_check ----

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double step, std::uint64_t probe_seed) {
  if (step <= 0) throw std::invalid_argument("grad_check: step must be > 0");
  Tensor xa = x.clone();
  xa.set_requires_grad(true);

  // probe weights fixed across all evaluations
  std::vector<double> probe;
  {
    Tape tape;
    Tensor y = f(xa);
    Rng rng(probe_seed);
    probe.resize(y.numel());
    for (double& p : probe) p = rng.normal(0.0, 1.0);
    Tensor w = Tensor::from(y.shape(), probe);
    Tensor s = sum_all(mul(y, w));
    tape.backward(s);
  }
  std::vector<double> analytic(xa.numel(), 0.0);
  if (const auto* g = xa.grad_if()) analytic = *g;

  auto eval = [&](const Tensor& xt) {
    NoGrad ng;
    Tensor y = f(xt);
    if (y.numel() != probe.size()) {
      throw ShapeError("grad_check: f output shape changed between calls");
    }
    double s = 0.0;
    const auto& yv = y.data();
    for (std::size_t i = 0; i < yv.size(); ++i) s += yv[i] * probe[i];
    return s;
  };

  double max_rel = 0.0;
  Tensor xp = x.clone();
  for (std::size_t i = 0; i < xp.numel(); ++i) {
    const double orig = xp.data()[i];
    xp.data()[i] = orig + step;
    const double up = eval(xp);
    xp.data()[i] = orig - step;
    const double dn = eval(xp);
    xp.data()[i] = orig;
    const double numeric = (up - dn) / (2.0 * step);
    if (!std::isfinite(numeric)) {
      throw NumericError("grad_check: non-finite finite-difference value");
    }
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric),
                                   1e-8});
    max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace hm
