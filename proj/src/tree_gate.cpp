#include "thin/tree_gate.hpp"

#include <cmath>

#include "thin/errors.hpp"

namespace thin {

GateTree::GateTree(std::size_t in_dim_, std::size_t depth_, RngStream& rng)
    : w(Tensor::zeros({in_dim_, ((std::size_t)1 << depth_) - 1}, true)),
      b(Tensor::zeros({((std::size_t)1 << depth_) - 1}, true)),
      in_dim(in_dim_),
      depth(depth_) {
  if (depth_ == 0) throw ContractError("gate tree needs depth >= 1");
  const double bound = 1.0 / std::sqrt((double)in_dim_);
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
}

Tensor GateTree::decisions(const Tensor& h) const {
  return sigmoid(add(matmul(h, w), b));
}

Tensor GateTree::forward(const Tensor& h) const {
  return leaf_probabilities(decisions(h), depth);
}

Tensor GateTree::leaf_probabilities(const Tensor& d, std::size_t depth) {
  const std::size_t nodes = ((std::size_t)1 << depth) - 1;
  const std::size_t L = (std::size_t)1 << depth;
  if (d.rank() != 2 || d.dim(1) != nodes)
    throw DimensionError("leaf_probabilities: decisions " +
                         shape_str(d.shape()) + " want " +
                         std::to_string(nodes) + " nodes");
  const std::size_t N = d.dim(0);

  Tensor mu = Tensor::zeros({N, L});
  for (std::size_t s = 0; s < N; ++s) {
    const double* dn = d.data() + s * nodes;
    for (std::size_t l = 0; l < L; ++l) {
      double p = 1.0;
      std::size_t node = 0;
      for (std::size_t t = 0; t < depth; ++t) {
        const std::size_t bit = (l >> (depth - 1 - t)) & 1u;
        p *= bit ? (1.0 - dn[node]) : dn[node];
        node = 2 * node + 1 + bit;
      }
      mu.data()[s * L + l] = p;
    }
  }

  if (should_record({&d})) {
    mu.ptr()->tracked = true;
    auto dd = d.ptr(), md = mu.ptr();
    Tape::active()->record([dd, md, N, L, nodes, depth] {
      if (md->grad.empty()) return;
      if (dd->grad.empty()) dd->grad.assign(dd->value.size(), 0.0);
      std::vector<double> factor(depth), pre(depth + 1), suf(depth + 1);
      std::vector<std::size_t> path(depth);
      std::vector<int> sign(depth);
      for (std::size_t s = 0; s < N; ++s) {
        const double* dn = dd->value.data() + s * nodes;
        for (std::size_t l = 0; l < L; ++l) {
          const double g = md->grad[s * L + l];
          if (g == 0.0) continue;
          std::size_t node = 0;
          for (std::size_t t = 0; t < depth; ++t) {
            const std::size_t bit = (l >> (depth - 1 - t)) & 1u;
            path[t] = node;
            sign[t] = bit ? -1 : 1;
            factor[t] = bit ? (1.0 - dn[node]) : dn[node];
            node = 2 * node + 1 + bit;
          }
          // Products of the other path factors, without dividing by a factor
          // that may be saturated at 0.
          pre[0] = 1.0;
          for (std::size_t t = 0; t < depth; ++t)
            pre[t + 1] = pre[t] * factor[t];
          suf[depth] = 1.0;
          for (std::size_t t = depth; t-- > 0;)
            suf[t] = suf[t + 1] * factor[t];
          for (std::size_t t = 0; t < depth; ++t)
            dd->grad[s * nodes + path[t]] +=
                g * sign[t] * pre[t] * suf[t + 1];
        }
      }
    });
  }
  return mu;
}

void GateTree::collect_params(const std::string& prefix, NamedParams& out) {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

}  // namespace thin
