#include "thin/losses.hpp"

#include <atomic>
#include <cmath>
#include <memory>

namespace thin {

namespace {
std::atomic<std::uint64_t> g_degenerate_rows{0};
}

std::uint64_t dispel_degenerate_rows() { return g_degenerate_rows.load(); }
void reset_dispel_degenerate_rows() { g_degenerate_rows.store(0); }

Tensor one_hot(const std::vector<int>& labels, std::size_t n_classes) {
  Tensor y = Tensor::zeros({labels.size(), n_classes});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    int c = labels[b];
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes)
      throw ContractError("one_hot: label " + std::to_string(c) +
                          " outside [0, " + std::to_string(n_classes) + ")");
    y.values()[b * n_classes + c] = 1.0;
  }
  return y;
}

Tensor cross_entropy(const Tensor& z, const Tensor& y_onehot) {
  if (z.rank() != 2)
    throw DimensionError("cross_entropy: logits must be [B,K], got " +
                         shape_str(z.shape()));
  if (y_onehot.shape() != z.shape())
    throw DimensionError("cross_entropy: target shape " +
                         shape_str(y_onehot.shape()) + " != logits shape " +
                         shape_str(z.shape()));
  const std::size_t B = z.dim(0), K = z.dim(1);
  if (B == 0) throw ContractError("cross_entropy: empty batch");

  auto targets = std::make_shared<std::vector<std::size_t>>(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t ones = 0, where = 0;
    for (std::size_t k = 0; k < K; ++k) {
      double v = y_onehot.values()[b * K + k];
      if (v == 1.0) {
        ++ones;
        where = k;
      } else if (v != 0.0) {
        throw ContractError("cross_entropy: target row " + std::to_string(b) +
                            " has entry " + std::to_string(v) +
                            "; rows must be exact one-hot");
      }
    }
    if (ones != 1)
      throw ContractError("cross_entropy: target row " + std::to_string(b) +
                          " has " + std::to_string(ones) +
                          " ones; rows must be exact one-hot");
    (*targets)[b] = where;
  }

  // Stabilized log-sum-exp and the softmax the backward pass reuses.
  auto probs = std::make_shared<std::vector<double>>(B * K);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = &z.values()[b * K];
    double m = row[0];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double e = std::exp(row[k] - m);
      (*probs)[b * K + k] = e;
      sum += e;
    }
    for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] /= sum;
    total += (m + std::log(sum)) - row[(*targets)[b]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));

  if (should_record({&z})) {
    out.ptr()->tracked = true;
    Tensor zc = z, oc = out, yc = y_onehot;
    Tape::active()->record([zc, oc, yc, probs, targets, B, K]() mutable {
      double g0 = oc.ptr()->grad[0];
      if (g0 == 0.0) return;
      auto& dz = zc.grad();
      const double inv_b = 1.0 / static_cast<double>(B);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
          dz[b * K + k] +=
              g0 * inv_b * ((*probs)[b * K + k] - yc.values()[b * K + k]);
    });
  }
  return out;
}

Tensor dispel_loss(const Tensor& z_exo_exo, const Tensor& z_exo_endo,
                   double eps) {
  const Tensor& u = z_exo_exo;
  const Tensor& v = z_exo_endo;
  if (u.rank() != 2 || v.shape() != u.shape())
    throw DimensionError("dispel_loss: need matching [B,K] inputs, got " +
                         shape_str(u.shape()) + " and " + shape_str(v.shape()));
  const std::size_t B = u.dim(0), K = u.dim(1);
  if (B == 0) throw ContractError("dispel_loss: empty batch");

  auto cos = std::make_shared<std::vector<double>>(B, 0.0);
  auto nu = std::make_shared<std::vector<double>>(B, 0.0);
  auto nv = std::make_shared<std::vector<double>>(B, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double a = u.values()[b * K + k], c = v.values()[b * K + k];
      uv += a * c;
      uu += a * a;
      vv += c * c;
    }
    (*nu)[b] = std::sqrt(uu);
    (*nv)[b] = std::sqrt(vv);
    if ((*nu)[b] < eps || (*nv)[b] < eps) {
      g_degenerate_rows.fetch_add(1);
      continue;  // row contributes zero, and zero gradient
    }
    (*cos)[b] = uv / ((*nu)[b] * (*nv)[b]);
    total += std::abs((*cos)[b]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));

  // The reference side u is frozen output and is treated as a constant; only
  // the probed side v receives gradient.
  if (should_record({&v})) {
    out.ptr()->tracked = true;
    Tensor uc = u, vc = v, oc = out;
    Tape::active()->record([uc, vc, oc, cos, nu, nv, B, K]() mutable {
      double g0 = oc.ptr()->grad[0];
      if (g0 == 0.0) return;
      auto& dv = vc.grad();
      const double inv_b = 1.0 / static_cast<double>(B);
      for (std::size_t b = 0; b < B; ++b) {
        double c = (*cos)[b];
        if (c == 0.0) continue;  // degenerate or exactly orthogonal row
        double sign = c > 0.0 ? 1.0 : -1.0;
        double denom = (*nu)[b] * (*nv)[b];
        double vv = (*nv)[b] * (*nv)[b];
        for (std::size_t k = 0; k < K; ++k)
          dv[b * K + k] += g0 * inv_b * sign *
                           (uc.values()[b * K + k] / denom -
                            c * vc.values()[b * K + k] / vv);
      }
    });
  }
  return out;
}

LossOut compute_losses(ThinModel& model, const Batch& batch, bool train) {
  LossOut out;
  out.fwd = model.forward_logits(batch, train);
  out.sup = cross_entropy(out.fwd.z, one_hot(batch.labels, model.n_classes()));

  const ExperimentConfig& cfg = model.config();
  ExoFactor pf = primary_factor(cfg.dataset);
  out.sim_active = model.has_stack(pf);
  if (!out.sim_active) {
    out.sim = Tensor::scalar(0.0);
    out.total = out.sup;
    return out;
  }

  Tensor u = batch.z_exo_exo_cached;
  if (!u.defined()) {
    ExoStack& s = model.stack(pf);
    u = s.classify_frozen(s.represent(batch.images));
  }
  if (cfg.lambda > 0.0) {
    Tensor v = model.exo_logits(out.fwd.h_endo);
    out.sim = dispel_loss(u, v);
    out.total = add(out.sup, mul_scalar(out.sim, cfg.lambda));
  } else {
    // Ablation: the objective is exactly the cross-entropy; the similarity
    // is still evaluated off the tape so it can be monitored.
    NoGradGuard ng;
    Tensor v = model.exo_logits(out.fwd.h_endo);
    out.sim = dispel_loss(u, v);
    out.total = out.sup;
  }
  return out;
}

}  // namespace thin
