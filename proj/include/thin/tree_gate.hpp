#pragma once

#include "thin/layers.hpp"
#include "thin/rng.hpp"
#include "thin/tensor.hpp"

namespace thin {

/// Soft binary decision tree over a feature vector. Every internal node n
/// computes d_n = sigmoid(w_n . h + b_n) = P(go left); a leaf's probability
/// is the product of its path's branch probabilities, so each row of the
/// output is a distribution over leaves by construction (no softmax).
///
/// Nodes are heap-ordered: node n's children are 2n+1 (left) and 2n+2
/// (right). Leaf l's path reads l's bits from the top level down, 0 = left.
class GateTree {
 public:
  GateTree(std::size_t in_dim, std::size_t depth, RngStream& rng);

  // Branch probabilities, [N, nodes].
  Tensor decisions(const Tensor& h) const;

  // Leaf distribution, [N, leaves]; rows sum to 1.
  Tensor forward(const Tensor& h) const;

  // Path products with a prefix/suffix-product backward, so gradients stay
  // finite even when a branch probability saturates to 0.
  static Tensor leaf_probabilities(const Tensor& d, std::size_t depth);

  std::size_t nodes() const { return ((std::size_t)1 << depth) - 1; }
  std::size_t leaves() const { return (std::size_t)1 << depth; }
  std::size_t param_count() const { return w.size() + b.size(); }
  void collect_params(const std::string& prefix, NamedParams& out);

  Tensor w, b;  // w:[in_dim, nodes], b:[nodes]
  std::size_t in_dim, depth;
};

}  // namespace thin
