#include "thin/layers.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "thin/errors.hpp"

namespace thin {

Tensor relu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i)
    y.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (should_record({&x})) {
    y.ptr()->tracked = true;
    auto xd = x.ptr(), yd = y.ptr();
    Tape::active()->record([xd, yd, n] {
      if (yd->grad.empty()) return;
      if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (xd->value[i] > 0.0) xd->grad[i] += yd->grad[i];
    });
  }
  return y;
}

void kaiming_uniform(Tensor& w, std::size_t fan_in, RngStream& rng) {
  const double bound = std::sqrt(6.0 / (double)fan_in);
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
}

// --- Dense -------------------------------------------------------------------

Dense::Dense(std::size_t in, std::size_t out, RngStream& rng)
    : w(Tensor::zeros({in, out}, true)), b(Tensor::zeros({out}, true)) {
  kaiming_uniform(w, in, rng);
}

Tensor Dense::forward(const Tensor& x) const { return add(matmul(x, w), b); }

std::size_t Dense::param_count() const { return w.size() + b.size(); }

void Dense::collect_params(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

// --- Conv2d ------------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_c_, std::size_t out_c_, std::size_t k_,
               RngStream& rng)
    : w(Tensor::zeros({out_c_, in_c_, k_, k_}, true)),
      b(Tensor::zeros({out_c_}, true)),
      in_c(in_c_),
      out_c(out_c_),
      k(k_) {
  kaiming_uniform(w, in_c * k * k, rng);
}

namespace {

// Expand one sample into a [C*k*k, H*W] patch matrix (zero padded). The
// column window [j0, j1) is the in-bounds span of each output row, so the
// interior is a straight memcpy and only the edges are zero-filled.
void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, double* cols) {
  const long pad = (long)(k - 1) / 2;
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t u = 0; u < k; ++u)
      for (std::size_t v = 0; v < k; ++v) {
        double* row = cols + ((c * k + u) * k + v) * HW;
        const long di = (long)u - pad, dj = (long)v - pad;
        const std::size_t j0 = dj < 0 ? (std::size_t)(-dj) : 0;
        const std::size_t j1 = dj > 0 ? W - (std::size_t)dj : W;
        for (std::size_t i = 0; i < H; ++i) {
          const long ii = (long)i + di;
          double* r = row + i * W;
          if (ii < 0 || ii >= (long)H) {
            std::fill_n(r, W, 0.0);
            continue;
          }
          const double* src = x + (c * H + ii) * W + dj;
          if (j0 > 0) std::fill_n(r, j0, 0.0);
          std::memcpy(r + j0, src + j0, (j1 - j0) * sizeof(double));
          if (j1 < W) std::fill_n(r + j1, W - j1, 0.0);
        }
      }
}

// Scatter-add the transpose of im2col: patch-matrix gradient back onto the
// image gradient. Same traversal order as the branchy form, so accumulation
// stays bit-identical; the inner loop is contiguous.
void col2im_add(const double* dcols, std::size_t C, std::size_t H,
                std::size_t W, std::size_t k, double* dx) {
  const long pad = (long)(k - 1) / 2;
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t u = 0; u < k; ++u)
      for (std::size_t v = 0; v < k; ++v) {
        const double* row = dcols + ((c * k + u) * k + v) * HW;
        const long di = (long)u - pad, dj = (long)v - pad;
        const std::size_t j0 = dj < 0 ? (std::size_t)(-dj) : 0;
        const std::size_t j1 = dj > 0 ? W - (std::size_t)dj : W;
        for (std::size_t i = 0; i < H; ++i) {
          const long ii = (long)i + di;
          if (ii < 0 || ii >= (long)H) continue;
          double* dst = dx + (c * H + ii) * W + dj;
          const double* r = row + i * W;
          for (std::size_t j = j0; j < j1; ++j) dst[j] += r[j];
        }
      }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != in_c)
    throw DimensionError("conv2d: input " + shape_str(x.shape()) +
                         " wants channels " + std::to_string(in_c));
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t F = out_c, CKK = in_c * k * k, HW = H * W;
  Tensor y = Tensor::zeros({N, F, H, W});

  // im2col fills every element, so the buffer can start uninitialized.
  std::shared_ptr<double[]> cols(new double[N * CKK * HW]);
  for (std::size_t n = 0; n < N; ++n) {
    double* cn = cols.get() + n * CKK * HW;
    im2col(x.data() + n * in_c * HW, in_c, H, W, k, cn);
    double* yn = y.data() + n * F * HW;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)F, (int)HW,
                (int)CKK, 1.0, w.data(), (int)CKK, cn, (int)HW, 0.0, yn,
                (int)HW);
    for (std::size_t f = 0; f < F; ++f) {
      const double bf = b.data()[f];
      for (std::size_t p = 0; p < HW; ++p) yn[f * HW + p] += bf;
    }
  }

  if (should_record({&x, &w, &b})) {
    y.ptr()->tracked = true;
    auto xd = x.ptr(), wd = w.ptr(), bd = b.ptr(), yd = y.ptr();
    const std::size_t C = in_c, kk = k;
    Tape::active()->record([xd, wd, bd, yd, cols, N, C, H, W, F, CKK, HW, kk] {
      if (yd->grad.empty()) return;
      const double* g = yd->grad.data();
      if (bd->requires_grad || bd->tracked) {
        if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t f = 0; f < F; ++f) {
            double acc = 0.0;
            const double* gn = g + (n * F + f) * HW;
            for (std::size_t p = 0; p < HW; ++p) acc += gn[p];
            bd->grad[f] += acc;
          }
      }
      if (wd->requires_grad || wd->tracked) {
        if (wd->grad.empty()) wd->grad.assign(wd->value.size(), 0.0);
        for (std::size_t n = 0; n < N; ++n)
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)F,
                      (int)CKK, (int)HW, 1.0, g + n * F * HW, (int)HW,
                      cols.get() + n * CKK * HW, (int)HW, 1.0,
                      wd->grad.data(), (int)CKK);
      }
      if (xd->requires_grad || xd->tracked) {
        if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
        std::vector<double> dcols(CKK * HW);
        for (std::size_t n = 0; n < N; ++n) {
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)CKK,
                      (int)HW, (int)F, 1.0, wd->value.data(), (int)CKK,
                      g + n * F * HW, (int)HW, 0.0, dcols.data(), (int)HW);
          col2im_add(dcols.data(), C, H, W, kk,
                     xd->grad.data() + n * C * HW);
        }
      }
    });
  }
  return y;
}

std::size_t Conv2d::param_count() const { return w.size() + b.size(); }

void Conv2d::collect_params(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

// --- MaxPool -----------------------------------------------------------------

Tensor maxpool2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("maxpool2: " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  // Odd edges behave as if padded with -inf: output dims round up and the
  // border windows just see fewer cells.
  const std::size_t Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  Tensor y = Tensor::zeros({N, C, Ho, Wo});
  std::vector<std::size_t> winners(y.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = (nc * H + 2 * i) * W + 2 * j;
        double m = x.data()[best];
        for (std::size_t u = 0; u < 2 && 2 * i + u < H; ++u)
          for (std::size_t v = 0; v < 2 && 2 * j + v < W; ++v) {
            const std::size_t idx = (nc * H + 2 * i + u) * W + 2 * j + v;
            if (x.data()[idx] > m) m = x.data()[idx], best = idx;
          }
        const std::size_t o = (nc * Ho + i) * Wo + j;
        y.data()[o] = m;
        winners[o] = best;
      }
  if (should_record({&x})) {
    y.ptr()->tracked = true;
    auto xd = x.ptr(), yd = y.ptr();
    Tape::active()->record([xd, yd, winners = std::move(winners)] {
      if (yd->grad.empty()) return;
      if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
      for (std::size_t o = 0; o < yd->grad.size(); ++o)
        xd->grad[winners[o]] += yd->grad[o];
    });
  }
  return y;
}

// --- BatchNorm ---------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t channels_)
    : gamma(Tensor::full({channels_}, 1.0, true)),
      beta(Tensor::zeros({channels_}, true)),
      run_mean(channels_, 0.0),
      run_var(channels_, 1.0),
      channels(channels_) {}

Tensor BatchNorm::forward(const Tensor& x, bool train) {
  std::size_t N, inner;
  if (x.rank() == 4 && x.dim(1) == channels) {
    N = x.dim(0);
    inner = x.dim(2) * x.dim(3);
  } else if (x.rank() == 2 && x.dim(1) == channels) {
    N = x.dim(0);
    inner = 1;
  } else {
    throw DimensionError("batchnorm(" + std::to_string(channels) +
                         "): input " + shape_str(x.shape()));
  }
  const std::size_t C = channels;
  const double m = (double)(N * inner);

  std::vector<double> mean(C), inv(C);
  if (train) {
    if (N * inner < 2)
      throw ContractError("batchnorm: batch statistics need >= 2 values");
    for (std::size_t c = 0; c < C; ++c) {
      double mu = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) mu += p[i];
      }
      mu /= m;
      double var = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = p[i] - mu;
          var += d * d;
        }
      }
      var /= m;  // biased, used for normalization
      mean[c] = mu;
      inv[c] = 1.0 / std::sqrt(var + eps);
      const double var_unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
      run_mean[c] = (1.0 - momentum) * run_mean[c] + momentum * mu;
      run_var[c] = (1.0 - momentum) * run_var[c] + momentum * var_unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = run_mean[c];
      inv[c] = 1.0 / std::sqrt(run_var[c] + eps);
    }
  }

  Tensor y = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data() + (n * C + c) * inner;
      double* h = xhat->data() + (n * C + c) * inner;
      double* q = y.data() + (n * C + c) * inner;
      const double g = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t i = 0; i < inner; ++i) {
        h[i] = (p[i] - mean[c]) * inv[c];
        q[i] = g * h[i] + bt;
      }
    }

  if (should_record({&x, &gamma, &beta})) {
    y.ptr()->tracked = true;
    auto xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), yd = y.ptr();
    const bool stats_from_batch = train;
    Tape::active()->record([xd, gd, bd, yd, xhat, inv, N, C, inner, m,
                            stats_from_batch] {
      if (yd->grad.empty()) return;
      const bool wx = xd->requires_grad || xd->tracked;
      const bool wp = gd->requires_grad || gd->tracked;  // frozen nets skip
      if (wx && xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
      if (wp && gd->grad.empty()) gd->grad.assign(gd->value.size(), 0.0);
      if (wp && bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        double sg = 0.0, sgh = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double* g = yd->grad.data() + (n * C + c) * inner;
          const double* h = xhat->data() + (n * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            sg += g[i];
            sgh += g[i] * h[i];
          }
        }
        if (wp) {
          bd->grad[c] += sg;
          gd->grad[c] += sgh;
        }
        if (!wx) continue;
        const double gi = gd->value[c] * inv[c];
        for (std::size_t n = 0; n < N; ++n) {
          const double* g = yd->grad.data() + (n * C + c) * inner;
          const double* h = xhat->data() + (n * C + c) * inner;
          double* dx = xd->grad.data() + (n * C + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            // Batch statistics couple every element of the channel; running
            // statistics are constants.
            dx[i] += stats_from_batch
                         ? gi / m * (m * g[i] - sg - h[i] * sgh)
                         : gi * g[i];
          }
        }
      }
    });
  }
  return y;
}

std::size_t BatchNorm::param_count() const {
  return gamma.size() + beta.size();
}

void BatchNorm::collect_params(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

void BatchNorm::collect_buffers(const std::string& prefix, NamedBuffers& out) {
  out.emplace_back(prefix + ".run_mean", &run_mean);
  out.emplace_back(prefix + ".run_var", &run_var);
}

// --- MlpHead -------------------------------------------------------------------

MlpHead::MlpHead(std::size_t in, std::size_t hidden, std::size_t out,
                 RngStream& rng)
    : fc1(in, hidden, rng), bn(hidden), fc2(hidden, out, rng) {}

Tensor MlpHead::forward(const Tensor& x, bool train) {
  return fc2.forward(relu(bn.forward(fc1.forward(x), train)));
}

std::size_t MlpHead::dense_param_count() const {
  return fc1.param_count() + fc2.param_count();
}

std::size_t MlpHead::param_count() const {
  return dense_param_count() + bn.param_count();
}

void MlpHead::collect_params(const std::string& prefix, NamedParams& out) {
  fc1.collect_params(prefix + ".fc1", out);
  bn.collect_params(prefix + ".bn", out);
  fc2.collect_params(prefix + ".fc2", out);
}

void MlpHead::collect_buffers(const std::string& prefix, NamedBuffers& out) {
  bn.collect_buffers(prefix + ".bn", out);
}

// --- RepresentationNet ---------------------------------------------------------

RepresentationNet::RepresentationNet(std::size_t in_c, std::size_t img_hw,
                                     RngStream& rng)
    : conv1(in_c, 16, 3, rng),
      bn1(16),
      conv2(16, 16, 3, rng),
      bn2(16),
      out_dim_(16 * (img_hw / 4) * (img_hw / 4)) {}

Tensor RepresentationNet::forward(const Tensor& x, bool train) {
  Tensor h = maxpool2(relu(bn1.forward(conv1.forward(x), train)));
  h = maxpool2(relu(bn2.forward(conv2.forward(h), train)));
  return reshape(h, {h.dim(0), h.size() / h.dim(0)});
}

std::size_t RepresentationNet::param_count() const {
  return conv1.param_count() + bn1.param_count() + conv2.param_count() +
         bn2.param_count();
}

void RepresentationNet::collect_params(const std::string& prefix,
                                       NamedParams& out) {
  conv1.collect_params(prefix + ".conv1", out);
  bn1.collect_params(prefix + ".bn1", out);
  conv2.collect_params(prefix + ".conv2", out);
  bn2.collect_params(prefix + ".bn2", out);
}

void RepresentationNet::collect_buffers(const std::string& prefix,
                                        NamedBuffers& out) {
  bn1.collect_buffers(prefix + ".bn1", out);
  bn2.collect_buffers(prefix + ".bn2", out);
}

}  // namespace thin
