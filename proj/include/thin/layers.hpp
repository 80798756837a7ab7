#pragma once

#include <string>
#include <utility>
#include <vector>

#include "thin/rng.hpp"
#include "thin/tensor.hpp"

namespace thin {

// Named trainable tensors / named persistent buffers (batch-norm running
// stats), in declaration order so checkpoints are stable.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;
using NamedBuffers = std::vector<std::pair<std::string, std::vector<double>*>>;

// max(x, 0); the zero point passes no gradient.
Tensor relu(const Tensor& x);

// Kaiming-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
void kaiming_uniform(Tensor& w, std::size_t fan_in, RngStream& rng);

/// y = x W + b with x:[N,in], W:[in,out].
class Dense {
 public:
  Dense(std::size_t in, std::size_t out, RngStream& rng);
  Tensor forward(const Tensor& x) const;
  std::size_t param_count() const;  // weights + biases
  void collect_params(const std::string& prefix, NamedParams& out);

  Tensor w, b;
};

/// Same-padded stride-1 convolution, im2col + GEMM. x:[N,C,H,W] -> [N,F,H,W].
class Conv2d {
 public:
  Conv2d(std::size_t in_c, std::size_t out_c, std::size_t k, RngStream& rng);
  Tensor forward(const Tensor& x) const;
  std::size_t param_count() const;
  void collect_params(const std::string& prefix, NamedParams& out);

  Tensor w, b;  // w:[F,C,k,k]
  std::size_t in_c, out_c, k;
};

/// 2x2 stride-2 max pooling; odd trailing rows/cols are dropped.
Tensor maxpool2(const Tensor& x);

/// Batch normalization over [N,C,H,W] (per channel) or [N,C] (per feature).
/// Training uses batch statistics with biased variance and updates running
/// stats (momentum 0.1, unbiased variance); eval normalizes by running stats.
class BatchNorm {
 public:
  explicit BatchNorm(std::size_t channels);
  Tensor forward(const Tensor& x, bool train);
  std::size_t param_count() const;
  void collect_params(const std::string& prefix, NamedParams& out);
  void collect_buffers(const std::string& prefix, NamedBuffers& out);

  Tensor gamma, beta;
  std::vector<double> run_mean, run_var;
  std::size_t channels;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Two-layer classifier head: Dense(in,hidden) -> BN -> ReLU -> Dense(hidden,out).
/// The final logits carry no normalization or activation.
class MlpHead {
 public:
  MlpHead(std::size_t in, std::size_t hidden, std::size_t out, RngStream& rng);
  Tensor forward(const Tensor& x, bool train);
  std::size_t dense_param_count() const;  // excludes batch-norm params
  std::size_t param_count() const;
  void collect_params(const std::string& prefix, NamedParams& out);
  void collect_buffers(const std::string& prefix, NamedBuffers& out);

  Dense fc1;
  BatchNorm bn;
  Dense fc2;
};

/// Shared image encoder: two rounds of Conv(16@3x3)->BN->ReLU->MaxPool(2),
/// flattened to [N, 16*(H/4)*(W/4)]. 28x28 inputs give 784-wide features,
/// 64x64 inputs give 4096.
class RepresentationNet {
 public:
  RepresentationNet(std::size_t in_c, std::size_t img_hw, RngStream& rng);
  Tensor forward(const Tensor& x, bool train);
  std::size_t out_dim() const { return out_dim_; }
  std::size_t param_count() const;
  void collect_params(const std::string& prefix, NamedParams& out);
  void collect_buffers(const std::string& prefix, NamedBuffers& out);

  Conv2d conv1;
  BatchNorm bn1;
  Conv2d conv2;
  BatchNorm bn2;

 private:
  std::size_t out_dim_;
};

}  // namespace thin
