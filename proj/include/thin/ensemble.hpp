#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "thin/config.hpp"
#include "thin/layers.hpp"
#include "thin/tree_gate.hpp"

namespace thin {

/// One mini-batch plus whatever side information the variant needs. Frozen
/// activations may be attached by the trainer's cache; when absent they are
/// recomputed from the frozen networks.
struct Batch {
  Tensor images;            // [B,1,H,W]
  std::vector<int> labels;  // task labels, length B
  std::vector<int> rotation_class;  // empty if the dataset lacks the factor
  std::vector<int> scale_class;

  std::vector<Tensor> h_exo_cached;  // per exo stack, [B,D]
  Tensor z_exo_exo_cached;           // [B,K_exo] dispelling reference
};

/// A frozen exogenous pathway: representation net plus its bin classifier,
/// trained in the pretraining stage and never updated again.
struct ExoStack {
  ExoStack(ExoFactor factor, std::size_t img_hw, std::size_t n_classes,
           RngStream& rng);

  Tensor represent(const Tensor& images);     // eval mode, no gradient
  Tensor classify_frozen(const Tensor& h);    // eval mode, no gradient
  Tensor classify_probe(const Tensor& h);     // eval-mode stats, grad into h

  void freeze();
  void collect_params(const std::string& prefix, NamedParams& out);
  void collect_buffers(const std::string& prefix, NamedBuffers& out);

  ExoFactor factor;
  std::size_t n_classes;
  RepresentationNet net;
  MlpHead classifier;
};

/// Gate-weighted sum of expert logits: z[b,k] = sum_l g[b,l] * z_l[b,k].
Tensor mix_logits(const std::vector<Tensor>& expert_logits, const Tensor& g);

struct ForwardOut {
  Tensor z;       // [B,K] mixed logits
  Tensor g;       // [B,L] gate ([B,1] of ones for the baseline)
  Tensor h_endo;  // [B,D]
  Tensor h_gate;  // what the tree saw (undefined for uniform/baseline)
};

/// The full model family: a shared endogenous encoder F_phi feeding either a
/// single wide head (baseline) or a committee of L weak heads mixed by a
/// uniform / learned-tree / oracle gate, with optional frozen exogenous
/// stacks for gating and for the dispelling loss.
class ThinModel {
 public:
  ThinModel(const ExperimentConfig& cfg, RngStream& init_rng);

  // Gate input assembly + expert mixture. `train` toggles batch-norm mode of
  // the trainable parts; frozen stacks always run in eval mode.
  ForwardOut forward_logits(const Batch& batch, bool train);

  // argmax of z per row; ties resolve to the lowest class index.
  std::vector<int> predict(const Batch& batch);

  // c_sigma(h) of the primary exo stack with gradient flowing into h only.
  Tensor exo_logits(const Tensor& h);

  std::size_t trainable_param_count() const;
  std::size_t frozen_param_count() const;
  void collect_trainable(NamedParams& out);
  void collect_frozen(NamedParams& out);
  void collect_buffers(NamedBuffers& out);

  const ExperimentConfig& config() const { return cfg_; }
  std::size_t n_classes() const { return n_classes_; }
  std::size_t feat_dim() const { return endo_net.out_dim(); }
  std::size_t gate_width() const;  // tree leaves (1 for baseline)

  // The exo stack backing a gating source / the dispelling loss. Throws
  // ConfigError when the stack is absent.
  ExoStack& stack(ExoFactor f);
  bool has_stack(ExoFactor f) const;

  RepresentationNet endo_net;
  std::vector<std::unique_ptr<ExoStack>> exo;  // 0, 1 or 2 stacks
  std::optional<MlpHead> baseline_head;
  std::vector<MlpHead> experts;
  std::optional<GateTree> tree;

 private:
  Tensor gate_input(const Batch& batch, const Tensor& h_endo);
  Tensor onehot_exo(const Batch& batch) const;

  ExperimentConfig cfg_;
  std::size_t n_classes_;
};

// Constructs the model for cfg, with exo stacks created (untrained) when the
// variant needs them. The caller loads pretrained weights and freezes.
ThinModel build_variant(const ExperimentConfig& cfg);

}  // namespace thin
