#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "thin/errors.hpp"

namespace thin {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;     // allocated lazily, same length as value
  bool requires_grad = false;   // leaf parameter
  bool tracked = false;         // produced by a recorded op on the active tape
};

/// Dense n-dimensional array of f64, row-major. Value semantics over a shared
/// payload; the payload is immutable after forward construction except for
/// gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->value.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

  double* data() { return d_->value.data(); }
  const double* data() const { return d_->value.data(); }
  std::vector<double>& values() { return d_->value; }
  const std::vector<double>& values() const { return d_->value; }
  double item() const;  // scalar tensors only

  bool requires_grad() const { return d_->requires_grad; }
  bool tracked() const { return d_->tracked; }
  // A gradient should flow into this tensor during backward.
  bool wants_grad() const { return d_->requires_grad || d_->tracked; }

  // Zero-fills on first use.
  std::vector<double>& grad();
  const std::vector<double>& grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad();

  std::shared_ptr<TensorData>& ptr() { return d_; }
  const std::shared_ptr<TensorData>& ptr() const { return d_; }

  bool all_finite() const;

 private:
  std::shared_ptr<TensorData> d_;
};

/// Recorded computation for one reverse-mode pass. Constructing a Tape makes
/// it the active tape for the current thread (define-by-run); destruction
/// restores the previous one. Ops record themselves only while a tape is
/// active, so eval-mode code pays nothing.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss)=1 and replays nodes in exact reverse recording
  // order. Accumulation across fan-out is additive.
  void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
};

/// Pauses gradient recording for the current scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();

 private:
  Tape* saved_;
};

enum class EwOp { add, sub, mul, div, neg, abs, exp, log, sigmoid };
enum class ReduceOp { sum, mean, max };

// --- Core arithmetic (tape-aware) ---------------------------------------

// C[m,n] = A[m,k] * B[k,n]; dA = dC*B^T, dB = A^T*dC.
Tensor matmul(const Tensor& a, const Tensor& b);

// Binary ops broadcast right-aligned (an axis must match or be 1).
Tensor elementwise(EwOp op, const Tensor& a);
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor mul_scalar(const Tensor& a, double s);

// Full reduction when axis < 0, otherwise along one axis. max routes its
// gradient to the argmax (lowest flat index on ties).
Tensor reduce(ReduceOp op, const Tensor& a, int axis = -1);

// Copying reshape with identity gradient.
Tensor reshape(const Tensor& a, Shape shape);

// [n,p] ++ [n,q] -> [n,p+q] along columns.
Tensor concat_cols(const Tensor& a, const Tensor& b);

// Scalar loss -> gradients on every reachable wants_grad tensor.
void backward(Tensor& loss, Tape& tape);

// For fused ops defined outside tensor.cpp: true when a backward node must be
// recorded (a tape is active and some input wants a gradient). The caller then
// marks its output tracked and records its own lambda.
bool should_record(std::initializer_list<const Tensor*> inputs);

// --- Gradient checking ----------------------------------------------------

struct GradCheckFailure {
  std::size_t index;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckReport {
  bool pass = true;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // detected non-differentiable points
  std::vector<GradCheckFailure> failures;
};

/// Central-difference check of the tape gradient of a scalar-valued f at x.
/// Elements where the one-sided slopes disagree (kinks such as |x| at 0) are
/// skipped with a warning count. NaN in f's output is reported as failure.
GradCheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f,
                          const Tensor& x, double h = 1e-5, double tol = 1e-6);

}  // namespace thin
