#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "thin/ensemble.hpp"
#include "thin/tensor.hpp"

namespace thin {

/// The dispelling weights swept by the lambda study; 0 is the ablation, the
/// default operating point is 0.005.
inline constexpr std::array<double, 7> kLambdaGrid = {0.0,  0.001, 0.005, 0.01,
                                                      0.05, 0.1,   0.5};

/// Rows must be exact one-hot vectors (a single 1.0, rest 0.0); anything else
/// is a caller bug and throws ContractError.
Tensor one_hot(const std::vector<int>& labels, std::size_t n_classes);

/// Mean negative log-likelihood of logits z [B,K] against one-hot targets
/// [B,K], computed via the log-sum-exp identity. Gradient flows into z only.
Tensor cross_entropy(const Tensor& z, const Tensor& y_onehot);

/// Mean absolute cosine similarity between matching rows of the frozen
/// reference logits u [B,K] and the probed logits v [B,K]. u is treated as a
/// constant: gradient flows into v only. A row whose norm (either side)
/// falls below eps contributes zero and bumps the degenerate-row counter.
Tensor dispel_loss(const Tensor& z_exo_exo, const Tensor& z_exo_endo,
                   double eps = 1e-12);

// Degenerate (near-zero-norm) rows seen by dispel_loss since the last reset.
std::uint64_t dispel_degenerate_rows();
void reset_dispel_degenerate_rows();

struct LossOut {
  Tensor total;     // L = L_sup + lambda * L_sim
  Tensor sup;       // cross-entropy term
  Tensor sim;       // dispelling term (monitored without gradient at lambda=0)
  bool sim_active;  // true when the model carries a dispelling stack
  ForwardOut fwd;   // the forward pass the losses were computed from
};

/// Runs the model forward and assembles the training objective. With
/// lambda = 0 the returned `total` is the cross-entropy tensor itself, so
/// the two are equal by construction, while `sim` is still evaluated (off
/// the tape) for monitoring whenever the model has a dispelling stack.
LossOut compute_losses(ThinModel& model, const Batch& batch, bool train);

}  // namespace thin
