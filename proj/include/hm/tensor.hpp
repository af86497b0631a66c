#pragma once

// Minimal dense tensor with reverse-mode autodiff.
//
// Tensors are handles with shared storage (copying a Tensor aliases the
// same buffer). Gradients are recorded on a define-by-run Tape: while a
// Tape is active, every op whose inputs require grad pushes an adjoint
// closure; Tape::backward replays the closures in reverse creation order,
// which is a valid topological order by construction.
//
// All values are 64-bit floats in row-major order. Every op checks its
// output for NaN/Inf and throws NumericError instead of propagating them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace hm {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t numel() const { return impl_->value.size(); }

  std::vector<double>& data() { return impl_->value; }
  const std::vector<double>& data() const { return impl_->value; }

  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  // Gradient buffer, allocated as zeros on first access.
  std::vector<double>& grad();
  // nullptr when no gradient has been accumulated yet.
  const std::vector<double>* grad_if() const;
  void zero_grad();

  // Deep copy of values (fresh storage, grad not copied).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Gradient tape. Constructing a Tape makes it the active tape for this
// thread; there is at most one active tape per thread (nesting throws).
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  std::size_t size() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs all adjoints in reverse order.
  // loss must be scalar and recorded on this tape; calling twice throws.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> ops_;
  bool backward_done_ = false;
};

// Runs backward on the currently active tape.
void backward(const Tensor& loss);

// Suspends gradient recording for the current scope.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Extra runtime validation (e.g. normalizer underflow raises instead of
// clamping). Wired to HEDGEMAMBA_LOG=debug by the CLI.
void set_debug_checks(bool on);
bool debug_checks();

// Counter of scalar multiply-add work, incremented analytically by each
// primitive's forward pass. Used by the complexity benchmark.
namespace opcount {
unsigned long long multadds();
void reset();
void add(unsigned long long n);
}  // namespace opcount

// Deterministic RNG for parameter init and data shuffling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}
  // splitmix64
  std::uint64_t next_u64();
  double uniform();                    // [0, 1)
  double normal(double mean, double stddev);
  std::uint64_t below(std::uint64_t n);  // uniform in [0, n)
  Tensor normal_tensor(Shape shape, double mean, double stddev,
                       bool requires_grad = false);

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---- primitive suite ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-D
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // m[r,c] + v[c]
Tensor mul_colvec(const Tensor& m, const Tensor& v);  // m[r,c] * v[r]
Tensor div_colvec(const Tensor& m, const Tensor& v);  // m[r,c] / v[r]

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);

// Numerically stable softmax over the last axis (max-subtracted).
Tensor softmax_last(const Tensor& a);
// Row-wise softmax of a square score matrix restricted to j <= i;
// entries above the diagonal are exactly zero.
Tensor causal_softmax(const Tensor& scores);

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor cumsum0(const Tensor& a);  // prefix sums along axis 0

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps);
// Depthwise causal conv over rows: y[l,c] = b[c] + sum_i w[i,c] x[l-K+1+i,c].
Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b);
// NeoX-style rotary embedding on the first rot_dims columns; row index is
// the sequence position.
Tensor rotary(const Tensor& x, std::size_t rot_dims, double base = 10000.0);

// ---- gradient checking ----

// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|,
// 1e-8), with the numeric side from central differences of step `step`.
// Non-scalar outputs are reduced through a fixed seeded linear functional.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double step, std::uint64_t probe_seed = 17);

}  // namespace hm
