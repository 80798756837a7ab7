#include "thin/ensemble.hpp"

#include <algorithm>

namespace thin {

// --- ExoStack ------------------------------------------------------------------

ExoStack::ExoStack(ExoFactor factor_, std::size_t img_hw,
                   std::size_t n_classes_, RngStream& rng)
    : factor(factor_),
      n_classes(n_classes_),
      net(1, img_hw, rng),
      classifier(16 * (img_hw / 4) * (img_hw / 4), 256, n_classes_, rng) {}

Tensor ExoStack::represent(const Tensor& images) {
  NoGradGuard ng;
  return net.forward(images, false);
}

Tensor ExoStack::classify_frozen(const Tensor& h) {
  NoGradGuard ng;
  return classifier.forward(h, false);
}

Tensor ExoStack::classify_probe(const Tensor& h) {
  // No guard: the gradient must reach h's upstream. The classifier's own
  // parameters are frozen, so they record nothing.
  return classifier.forward(h, false);
}

void ExoStack::freeze() {
  NamedParams ps;
  collect_params("", ps);
  for (auto& [name, t] : ps) t.ptr()->requires_grad = false;
}

void ExoStack::collect_params(const std::string& prefix, NamedParams& out) {
  net.collect_params(prefix + ".net", out);
  classifier.collect_params(prefix + ".cls", out);
}

void ExoStack::collect_buffers(const std::string& prefix, NamedBuffers& out) {
  net.collect_buffers(prefix + ".net", out);
  classifier.collect_buffers(prefix + ".cls", out);
}

// --- mixture --------------------------------------------------------------------

Tensor mix_logits(const std::vector<Tensor>& expert_logits, const Tensor& g) {
  if (expert_logits.empty())
    throw ContractError("mix_logits: no expert logits");
  const std::size_t L = expert_logits.size();
  const std::size_t B = expert_logits[0].dim(0);
  const std::size_t K = expert_logits[0].dim(1);
  if (g.rank() != 2 || g.dim(0) != B || g.dim(1) != L)
    throw DimensionError("mix_logits: gate " + shape_str(g.shape()) +
                         " for L=" + std::to_string(L) +
                         " B=" + std::to_string(B));
  for (const auto& z : expert_logits)
    if (z.shape() != expert_logits[0].shape())
      throw DimensionError("mix_logits: ragged expert logits");

  Tensor z = Tensor::zeros({B, K});
  for (std::size_t l = 0; l < L; ++l) {
    const double* zl = expert_logits[l].data();
    for (std::size_t bi = 0; bi < B; ++bi) {
      const double gl = g.data()[bi * L + l];
      for (std::size_t k = 0; k < K; ++k)
        z.data()[bi * K + k] += gl * zl[bi * K + k];
    }
  }

  bool rec = g.defined() && (Tape::active() != nullptr) && g.wants_grad();
  for (const auto& t : expert_logits)
    rec = rec || should_record({&t});
  if (rec) {
    z.ptr()->tracked = true;
    std::vector<std::shared_ptr<TensorData>> zs;
    zs.reserve(L);
    for (const auto& t : expert_logits) zs.push_back(t.ptr());
    auto gd = g.ptr(), zd = z.ptr();
    Tape::active()->record([zs, gd, zd, B, K, L] {
      if (zd->grad.empty()) return;
      const double* dz = zd->grad.data();
      const bool wg = gd->requires_grad || gd->tracked;
      if (wg && gd->grad.empty()) gd->grad.assign(gd->value.size(), 0.0);
      for (std::size_t l = 0; l < L; ++l) {
        auto& el = zs[l];
        const bool we = el->requires_grad || el->tracked;
        if (we && el->grad.empty()) el->grad.assign(el->value.size(), 0.0);
        for (std::size_t bi = 0; bi < B; ++bi) {
          const double gl = gd->value[bi * L + l];
          double acc = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            const double d = dz[bi * K + k];
            if (we) el->grad[bi * K + k] += gl * d;
            acc += el->value[bi * K + k] * d;
          }
          if (wg) gd->grad[bi * L + l] += acc;
        }
      }
    });
  }
  return z;
}

// --- ThinModel -------------------------------------------------------------------

namespace {

bool variant_has_tree(Variant v) {
  return v == Variant::tree_gated || v == Variant::exo_tree_gated ||
         v == Variant::oracle || v == Variant::thin;
}

}  // namespace

ThinModel::ThinModel(const ExperimentConfig& cfg, RngStream& init_rng)
    : endo_net(1, image_hw(cfg.dataset), init_rng),
      cfg_(cfg),
      n_classes_(task_classes(cfg.dataset)) {
  const std::size_t D = endo_net.out_dim();
  const std::size_t K = n_classes_;

  if (cfg.variant == Variant::baseline) {
    baseline_head.emplace(D, 256, K, init_rng);
  } else {
    experts.reserve(cfg.n_experts);
    for (std::size_t l = 0; l < cfg.n_experts; ++l)
      experts.emplace_back(D, 32, K, init_rng);
  }

  if (variant_has_tree(cfg.variant)) {
    std::size_t gate_dim = 0;
    switch (cfg.gating_source) {
      case GatingSource::endogenous: gate_dim = D; break;
      case GatingSource::exogenous_rotation:
      case GatingSource::exogenous_scale: gate_dim = D; break;
      case GatingSource::exo_concat: gate_dim = 2 * D; break;
      case GatingSource::oracle_onehot:
        gate_dim = exo_classes(cfg.dataset, primary_factor(cfg.dataset));
        break;
    }
    tree.emplace(gate_dim, cfg.tree_depth, init_rng);
  }

  // Frozen stacks draw from their own stream: their init is overwritten by
  // the pretrained checkpoint anyway, and this keeps the trainable init
  // sequence identical across variants for a given seed.
  RngStream exo_rng(cfg.seed, "exo_init");
  std::vector<ExoFactor> needed;
  auto need = [&](ExoFactor f) {
    if (std::find(needed.begin(), needed.end(), f) == needed.end())
      needed.push_back(f);
  };
  if (cfg.gating_source == GatingSource::exogenous_rotation)
    need(ExoFactor::rotation);
  if (cfg.gating_source == GatingSource::exogenous_scale)
    need(ExoFactor::scale);
  if (cfg.gating_source == GatingSource::exo_concat) {
    need(ExoFactor::rotation);
    need(ExoFactor::scale);
  }
  if (cfg.lambda > 0.0) need(primary_factor(cfg.dataset));
  for (ExoFactor f : needed)
    exo.push_back(std::make_unique<ExoStack>(
        f, image_hw(cfg.dataset), exo_classes(cfg.dataset, f), exo_rng));
}

ExoStack& ThinModel::stack(ExoFactor f) {
  for (auto& s : exo)
    if (s->factor == f) return *s;
  throw ConfigError("model has no frozen " + to_string(f) +
                    " stack (variant " + to_string(cfg_.variant) + ")");
}

bool ThinModel::has_stack(ExoFactor f) const {
  for (const auto& s : exo)
    if (s->factor == f) return true;
  return false;
}

Tensor ThinModel::onehot_exo(const Batch& batch) const {
  const ExoFactor f = primary_factor(cfg_.dataset);
  const std::vector<int>& cls = f == ExoFactor::rotation
                                    ? batch.rotation_class
                                    : batch.scale_class;
  if (cls.size() != batch.images.dim(0))
    throw ContractError("oracle gating needs per-sample " + to_string(f) +
                        " classes");
  const std::size_t bins = exo_classes(cfg_.dataset, f);
  Tensor oh = Tensor::zeros({cls.size(), bins});
  for (std::size_t i = 0; i < cls.size(); ++i) {
    if (cls[i] < 0 || (std::size_t)cls[i] >= bins)
      throw ContractError("exo class out of range: " + std::to_string(cls[i]));
    oh.data()[i * bins + cls[i]] = 1.0;
  }
  return oh;
}

Tensor ThinModel::gate_input(const Batch& batch, const Tensor& h_endo) {
  auto cached_or_fresh = [&](ExoFactor f) -> Tensor {
    for (std::size_t i = 0; i < exo.size(); ++i)
      if (exo[i]->factor == f && i < batch.h_exo_cached.size() &&
          batch.h_exo_cached[i].defined())
        return batch.h_exo_cached[i];
    return stack(f).represent(batch.images);
  };
  switch (cfg_.gating_source) {
    case GatingSource::endogenous: return h_endo;
    case GatingSource::exogenous_rotation:
      return cached_or_fresh(ExoFactor::rotation);
    case GatingSource::exogenous_scale:
      return cached_or_fresh(ExoFactor::scale);
    case GatingSource::exo_concat:
      return concat_cols(cached_or_fresh(ExoFactor::rotation),
                         cached_or_fresh(ExoFactor::scale));
    case GatingSource::oracle_onehot: return onehot_exo(batch);
  }
  throw ConfigError("bad gating source");
}

ForwardOut ThinModel::forward_logits(const Batch& batch, bool train) {
  ForwardOut out;
  out.h_endo = endo_net.forward(batch.images, train);
  const std::size_t B = batch.images.dim(0);

  if (cfg_.variant == Variant::baseline) {
    out.z = baseline_head->forward(out.h_endo, train);
    out.g = Tensor::full({B, 1}, 1.0);
    return out;
  }

  std::vector<Tensor> zs;
  zs.reserve(experts.size());
  for (auto& e : experts) zs.push_back(e.forward(out.h_endo, train));

  if (cfg_.variant == Variant::simple_ensemble) {
    out.g = Tensor::full({B, experts.size()}, 1.0 / (double)experts.size());
  } else {
    out.h_gate = gate_input(batch, out.h_endo);
    out.g = tree->forward(out.h_gate);
  }
  out.z = mix_logits(zs, out.g);
  return out;
}

std::vector<int> ThinModel::predict(const Batch& batch) {
  NoGradGuard ng;
  ForwardOut f = forward_logits(batch, false);
  const std::size_t B = f.z.dim(0), K = f.z.dim(1);
  std::vector<int> pred(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = f.z.data() + b * K;
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (row[k] > row[best]) best = k;  // strict: ties keep the lowest index
    pred[b] = (int)best;
  }
  return pred;
}

Tensor ThinModel::exo_logits(const Tensor& h) {
  return stack(primary_factor(cfg_.dataset)).classify_probe(h);
}

void ThinModel::collect_trainable(NamedParams& out) {
  endo_net.collect_params("endo", out);
  if (baseline_head) baseline_head->collect_params("baseline", out);
  for (std::size_t l = 0; l < experts.size(); ++l)
    experts[l].collect_params("head.expert" + std::to_string(l), out);
  if (tree) tree->collect_params("head.tree", out);
}

void ThinModel::collect_frozen(NamedParams& out) {
  for (auto& s : exo) s->collect_params("exo_" + to_string(s->factor), out);
}

void ThinModel::collect_buffers(NamedBuffers& out) {
  endo_net.collect_buffers("endo", out);
  if (baseline_head) baseline_head->collect_buffers("baseline", out);
  for (std::size_t l = 0; l < experts.size(); ++l)
    experts[l].collect_buffers("head.expert" + std::to_string(l), out);
  for (auto& s : exo) s->collect_buffers("exo_" + to_string(s->factor), out);
}

std::size_t ThinModel::trainable_param_count() const {
  NamedParams ps;
  const_cast<ThinModel*>(this)->collect_trainable(ps);
  std::size_t n = 0;
  for (auto& [name, t] : ps) n += t.size();
  return n;
}

std::size_t ThinModel::frozen_param_count() const {
  NamedParams ps;
  const_cast<ThinModel*>(this)->collect_frozen(ps);
  std::size_t n = 0;
  for (auto& [name, t] : ps) n += t.size();
  return n;
}

std::size_t ThinModel::gate_width() const {
  return cfg_.variant == Variant::baseline ? 1 : experts.size();
}

ThinModel build_variant(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.finalize();  // idempotent; guarantees defaults are resolved
  RngStream init(c.seed, "init");
  return ThinModel(c, init);
}

}  // namespace thin
