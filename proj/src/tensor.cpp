#include "thin/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <sstream>

extern "C" void openblas_set_num_threads(int);

namespace thin {

namespace {
// Multi-threaded GEMM reorders reductions; pin to one thread so results are
// bit-identical across runs.
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
} g_blas_init;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value.assign(numel(t.d_->shape), fill);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (numel(shape) != values.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " wants " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value = std::move(values);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
  if (!d_ || d_->value.size() != 1)
    throw ContractError("item() on non-scalar tensor");
  return d_->value[0];
}

std::vector<double>& Tensor::grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
  return d_->grad;
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : d_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

// --- Tape ------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  loss.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void backward(Tensor& loss, Tape& tape) { tape.backward(loss); }

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->wants_grad()) return true;
  return false;
}

// --- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)m, (int)n,
              (int)k, 1.0, a.data(), (int)k, b.data(), (int)n, 0.0, c.data(),
              (int)n);
  if (should_record({&a, &b})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
    Tape::active()->record([ad, bd, cd, m, k, n] {
      if (cd->grad.empty()) return;
      const double* g = cd->grad.data();
      if (ad->requires_grad || ad->tracked) {
        if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
        // dA += dC * B^T
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)m, (int)k,
                    (int)n, 1.0, g, (int)n, bd->value.data(), (int)n, 1.0,
                    ad->grad.data(), (int)k);
      }
      if (bd->requires_grad || bd->tracked) {
        if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
        // dB += A^T * dC
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)k, (int)n,
                    (int)m, 1.0, ad->value.data(), (int)k, g, (int)n, 1.0,
                    bd->grad.data(), (int)n);
      }
    });
  }
  return c;
}

// --- elementwise -----------------------------------------------------------

namespace {

const char* ew_name(EwOp op) {
  switch (op) {
    case EwOp::add: return "add";
    case EwOp::sub: return "sub";
    case EwOp::mul: return "mul";
    case EwOp::div: return "div";
    case EwOp::neg: return "neg";
    case EwOp::abs: return "abs";
    case EwOp::exp: return "exp";
    case EwOp::log: return "log";
    case EwOp::sigmoid: return "sigmoid";
  }
  return "?";
}

double ew_apply(EwOp op, double x, double y) {
  switch (op) {
    case EwOp::add: return x + y;
    case EwOp::sub: return x - y;
    case EwOp::mul: return x * y;
    case EwOp::div:
      if (y == 0.0) throw NumericError("div: division by zero");
      return x / y;
    default: throw ContractError("ew_apply: not a binary op");
  }
}

double ew_apply(EwOp op, double x) {
  switch (op) {
    case EwOp::neg: return -x;
    case EwOp::abs: return std::fabs(x);
    case EwOp::exp: return std::exp(x);
    case EwOp::log:
      if (x <= 0.0)
        throw NumericError("log: non-positive input " + std::to_string(x));
      return std::log(x);
    case EwOp::sigmoid:
      // Branch keeps exp() off the overflow side for large |x|.
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
    default: throw ContractError("ew_apply: not a unary op");
  }
}

// d(out)/d(input) for the unary ops, given input x and output c.
double ew_unary_dx(EwOp op, double x, double c) {
  switch (op) {
    case EwOp::neg: return -1.0;
    case EwOp::abs: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    case EwOp::exp: return c;
    case EwOp::log: return 1.0 / x;
    case EwOp::sigmoid: return c * (1.0 - c);
    default: throw ContractError("ew_unary_dx: not a unary op");
  }
}

// Right-aligned broadcast shape of a and b, or throws.
Shape broadcast_shape(EwOp op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(ew_name(op)) + ": cannot broadcast " +
                           shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides into a tensor of shape `in`, right-aligned under `out`; broadcast
// axes get stride 0 so a flat walk over `out` can index into `in`.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    st[off + i] = (in[i] == 1) ? 0 : stride;
    stride *= in[i];
  }
  return st;
}

// Maps a flat index in `out` to a flat index through broadcast strides.
inline std::size_t bcast_index(std::size_t flat, const Shape& out,
                               const std::vector<std::size_t>& st) {
  std::size_t idx = 0;
  for (std::size_t i = out.size(); i-- > 0;) {
    idx += (flat % out[i]) * st[i];
    flat /= out[i];
  }
  return idx;
}

}  // namespace

Tensor elementwise(EwOp op, const Tensor& a) {
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  const double* x = a.data();
  double* y = c.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = ew_apply(op, x[i]);
  if (should_record({&a})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), cd = c.ptr();
    Tape::active()->record([op, ad, cd, n] {
      if (cd->grad.empty()) return;
      if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        ad->grad[i] +=
            cd->grad[i] * ew_unary_dx(op, ad->value[i], cd->value[i]);
    });
  }
  return c;
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  Shape out_shape =
      same ? a.shape() : broadcast_shape(op, a.shape(), b.shape());
  Tensor c = Tensor::zeros(out_shape);
  const std::size_t n = c.size();
  const double* xa = a.data();
  const double* xb = b.data();
  double* y = c.data();

  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < n; ++i) y[i] = ew_apply(op, xa[i], xb[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for (std::size_t i = 0; i < n; ++i)
      y[i] = ew_apply(op, xa[bcast_index(i, out_shape, sa)],
                      xb[bcast_index(i, out_shape, sb)]);
  }

  if (should_record({&a, &b})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
    Tape::active()->record([op, ad, bd, cd, same, out_shape, sa, sb, n] {
      if (cd->grad.empty()) return;
      const bool wa = ad->requires_grad || ad->tracked;
      const bool wb = bd->requires_grad || bd->tracked;
      if (wa && ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
      if (wb && bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = same ? i : bcast_index(i, out_shape, sa);
        const std::size_t ib = same ? i : bcast_index(i, out_shape, sb);
        const double g = cd->grad[i];
        switch (op) {
          case EwOp::add:
            if (wa) ad->grad[ia] += g;
            if (wb) bd->grad[ib] += g;
            break;
          case EwOp::sub:
            if (wa) ad->grad[ia] += g;
            if (wb) bd->grad[ib] -= g;
            break;
          case EwOp::mul:
            if (wa) ad->grad[ia] += g * bd->value[ib];
            if (wb) bd->grad[ib] += g * ad->value[ia];
            break;
          case EwOp::div: {
            const double inv = 1.0 / bd->value[ib];
            if (wa) ad->grad[ia] += g * inv;
            if (wb) bd->grad[ib] -= g * cd->value[i] * inv;
            break;
          }
          default:
            throw ContractError("elementwise backward: not a binary op");
        }
      }
    });
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(EwOp::add, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(EwOp::sub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(EwOp::mul, a, b);
}
Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise(EwOp::div, a, b);
}
Tensor neg(const Tensor& a) { return elementwise(EwOp::neg, a); }
Tensor abs(const Tensor& a) { return elementwise(EwOp::abs, a); }
Tensor exp(const Tensor& a) { return elementwise(EwOp::exp, a); }
Tensor log(const Tensor& a) { return elementwise(EwOp::log, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(EwOp::sigmoid, a); }

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * s;
  if (should_record({&a})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), cd = c.ptr();
    Tape::active()->record([ad, cd, s, n] {
      if (cd->grad.empty()) return;
      if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) ad->grad[i] += cd->grad[i] * s;
    });
  }
  return c;
}

// --- reductions ------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& a, int axis) {
  const std::size_t n = a.size();
  if (n == 0) throw ContractError("reduce: empty tensor");

  if (axis < 0) {
    double acc;
    std::size_t arg = 0;
    if (op == ReduceOp::max) {
      acc = a.data()[0];
      for (std::size_t i = 1; i < n; ++i)
        if (a.data()[i] > acc) acc = a.data()[i], arg = i;
    } else {
      acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += a.data()[i];
      if (op == ReduceOp::mean) acc /= (double)n;
    }
    Tensor c = Tensor::scalar(acc);
    if (should_record({&a})) {
      c.ptr()->tracked = true;
      auto ad = a.ptr(), cd = c.ptr();
      Tape::active()->record([op, ad, cd, n, arg] {
        if (cd->grad.empty()) return;
        if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
        const double g = cd->grad[0];
        switch (op) {
          case ReduceOp::sum:
            for (std::size_t i = 0; i < n; ++i) ad->grad[i] += g;
            break;
          case ReduceOp::mean:
            for (std::size_t i = 0; i < n; ++i) ad->grad[i] += g / (double)n;
            break;
          case ReduceOp::max: ad->grad[arg] += g; break;
        }
      });
    }
    return c;
  }

  const std::size_t ax = (std::size_t)axis;
  if (ax >= a.rank())
    throw DimensionError("reduce: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(a.shape()));
  const std::size_t len = a.dim(ax);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= a.dim(i);
  for (std::size_t i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != ax) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape = {1};

  Tensor c = Tensor::zeros(out_shape);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::max) argmax.assign(outer * inner, 0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double acc = op == ReduceOp::max ? a.data()[base] : 0.0;
      std::size_t arg = 0;
      for (std::size_t j = (op == ReduceOp::max ? 1u : 0u); j < len; ++j) {
        const double v = a.data()[base + j * inner];
        if (op == ReduceOp::max) {
          if (v > acc) acc = v, arg = j;
        } else {
          acc += v;
        }
      }
      if (op == ReduceOp::mean) acc /= (double)len;
      c.data()[o * inner + i] = acc;
      if (op == ReduceOp::max) argmax[o * inner + i] = arg;
    }

  if (should_record({&a})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), cd = c.ptr();
    Tape::active()->record([op, ad, cd, outer, inner, len,
                            argmax = std::move(argmax)] {
      if (cd->grad.empty()) return;
      if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const double g = cd->grad[o * inner + i];
          const std::size_t base = o * len * inner + i;
          switch (op) {
            case ReduceOp::sum:
              for (std::size_t j = 0; j < len; ++j)
                ad->grad[base + j * inner] += g;
              break;
            case ReduceOp::mean:
              for (std::size_t j = 0; j < len; ++j)
                ad->grad[base + j * inner] += g / (double)len;
              break;
            case ReduceOp::max:
              ad->grad[base + argmax[o * inner + i] * inner] += g;
              break;
          }
        }
    });
  }
  return c;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
  Tensor c = Tensor::from(std::move(shape), a.values());
  if (should_record({&a})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), cd = c.ptr();
    Tape::active()->record([ad, cd] {
      if (cd->grad.empty()) return;
      if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
      for (std::size_t i = 0; i < cd->grad.size(); ++i)
        ad->grad[i] += cd->grad[i];
    });
  }
  return c;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: " + shape_str(a.shape()) + " ++ " +
                         shape_str(b.shape()));
  const std::size_t n = a.dim(0), p = a.dim(1), q = b.dim(1);
  Tensor c = Tensor::zeros({n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * p, p, c.data() + i * (p + q));
    std::copy_n(b.data() + i * q, q, c.data() + i * (p + q) + p);
  }
  if (should_record({&a, &b})) {
    c.ptr()->tracked = true;
    auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
    Tape::active()->record([ad, bd, cd, n, p, q] {
      if (cd->grad.empty()) return;
      if (ad->requires_grad || ad->tracked) {
        if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j)
            ad->grad[i * p + j] += cd->grad[i * (p + q) + j];
      }
      if (bd->requires_grad || bd->tracked) {
        if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j)
            bd->grad[i * q + j] += cd->grad[i * (p + q) + p + j];
      }
    });
  }
  return c;
}

// --- gradcheck ---------------------------------------------------------------

GradCheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f,
                          const Tensor& x, double h, double tol) {
  GradCheckReport rep;
  Tensor xv = x;  // shared payload; perturbed in place and restored
  xv.ptr()->requires_grad = true;

  std::vector<double> analytic;
  {
    Tape tape;
    xv.zero_grad();
    Tensor out = f(xv);
    if (out.size() != 1)
      throw ContractError("gradcheck: f must return a scalar");
    tape.backward(out);
    analytic = xv.grad();
  }

  NoGradGuard ng;
  const double f0 = f(xv).item();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double orig = xv.data()[i];
    xv.data()[i] = orig + h;
    const double fp = f(xv).item();
    xv.data()[i] = orig - h;
    const double fm = f(xv).item();
    xv.data()[i] = orig;

    if (std::isnan(fp) || std::isnan(fm) || std::isnan(f0)) {
      rep.failures.push_back({i, analytic[i], std::nan(""), std::nan("")});
      rep.pass = false;
      continue;
    }
    // Disagreeing one-sided slopes mean we straddle a kink; skip the element.
    const double dp = (fp - f0) / h;
    const double dm = (f0 - fm) / h;
    if (std::fabs(dp - dm) >
        1e-2 * std::max({1.0, std::fabs(dp), std::fabs(dm)})) {
      ++rep.skipped;
      continue;
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel =
        std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-3});
    ++rep.checked;
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    if (rel > tol) {
      rep.failures.push_back({i, a, fd, rel});
      rep.pass = false;
    }
  }
  return rep;
}

}  // namespace thin
