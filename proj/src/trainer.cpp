#include "thin/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace thin {

// --- Adam ----------------------------------------------------------------

Adam::Adam(NamedParams params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (auto& [name, p] : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    const std::vector<double>& g = p.ptr()->grad;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      if (!std::isfinite(gk))
        throw NumericError("adam: non-finite gradient in parameter '" + name +
                           "' at element " + std::to_string(k));
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      p.values()[k] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

// --- Checkpoints -----------------------------------------------------------

void save_checkpoint(const std::string& path, nlohmann::json manifest,
                     const NamedParams& params, const NamedBuffers& buffers) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, p] : params)
    tensors.push_back({{"name", name}, {"shape", p.shape()}});
  nlohmann::json bufs = nlohmann::json::array();
  for (const auto& [name, b] : buffers)
    bufs.push_back({{"name", name}, {"size", b->size()}});
  manifest["tensors"] = std::move(tensors);
  manifest["buffers"] = std::move(bufs);
  manifest["format_version"] = 1;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write("THINCKPT", 8);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::string m = manifest.dump();
  const std::uint32_t mlen = static_cast<std::uint32_t>(m.size());
  out.write(reinterpret_cast<const char*>(&mlen), 4);
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& [name, p] : params)
    out.write(reinterpret_cast<const char*>(p.values().data()),
              static_cast<std::streamsize>(p.size() * sizeof(double)));
  for (const auto& [name, b] : buffers)
    out.write(reinterpret_cast<const char*>(b->data()),
              static_cast<std::streamsize>(b->size() * sizeof(double)));
  if (!out) throw IoError("short write to checkpoint " + path);
}

nlohmann::json load_checkpoint(const std::string& path, NamedParams& params,
                               NamedBuffers& buffers) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "THINCKPT", 8) != 0)
    throw IoError(path + ": bad checkpoint magic");
  std::uint32_t version = 0, mlen = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&mlen), 4);
  if (!in || version != 1)
    throw IoError(path + ": unsupported checkpoint version");
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), mlen);
  if (!in) throw IoError(path + ": truncated manifest");
  nlohmann::json manifest = nlohmann::json::parse(mtext, nullptr, false);
  if (manifest.is_discarded()) throw IoError(path + ": manifest is not JSON");

  // Payload order and sizes come from the manifest.
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;
  for (const auto& t : manifest.at("tensors")) {
    Entry e{t.at("name").get<std::string>(),
            t.at("shape").get<Shape>(), total};
    total += numel(e.shape);
    entries.push_back(std::move(e));
  }
  std::vector<Entry> buf_entries;
  for (const auto& t : manifest.at("buffers")) {
    Entry e{t.at("name").get<std::string>(),
            {t.at("size").get<std::size_t>()}, total};
    total += e.shape[0];
    buf_entries.push_back(std::move(e));
  }
  std::vector<double> payload(total);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  if (!in) throw IoError(path + ": truncated payload");

  auto find = [&](const std::vector<Entry>& es, const std::string& name,
                  const char* kind) -> const Entry& {
    for (const auto& e : es)
      if (e.name == name) return e;
    throw IoError(path + ": checkpoint is missing " + kind + " '" + name +
                  "'");
  };
  for (auto& [name, p] : params) {
    const Entry& e = find(entries, name, "tensor");
    if (e.shape != p.shape())
      throw IoError(path + ": shape mismatch for '" + name + "': file " +
                    shape_str(e.shape) + " vs model " + shape_str(p.shape()));
    std::memcpy(p.values().data(), &payload[e.offset],
                p.size() * sizeof(double));
  }
  for (auto& [name, b] : buffers) {
    const Entry& e = find(buf_entries, name, "buffer");
    if (e.shape[0] != b->size())
      throw IoError(path + ": size mismatch for buffer '" + name + "'");
    std::memcpy(b->data(), &payload[e.offset], b->size() * sizeof(double));
  }
  return manifest;
}

void save_model_checkpoint(const std::string& path, ThinModel& model,
                           nlohmann::json manifest) {
  NamedParams params;
  model.collect_trainable(params);
  model.collect_frozen(params);
  NamedBuffers buffers;
  model.collect_buffers(buffers);
  save_checkpoint(path, std::move(manifest), params, buffers);
}

nlohmann::json load_model_checkpoint(const std::string& path,
                                     ThinModel& model) {
  NamedParams params;
  model.collect_trainable(params);
  model.collect_frozen(params);
  NamedBuffers buffers;
  model.collect_buffers(buffers);
  return load_checkpoint(path, params, buffers);
}

std::uint64_t params_hash(const NamedParams& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ull;
  };
  for (const auto& [name, p] : params) {
    mix(name.data(), name.size());
    mix(p.values().data(), p.size() * sizeof(double));
  }
  return h;
}

// --- Metric log ---------------------------------------------------------------

MetricLog::MetricLog(const std::string& path) {
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot open metric log " + path);
}

void MetricLog::record(const nlohmann::json& j) {
  records_.push_back(j);
  if (out_.is_open()) {
    out_ << j.dump() << "\n";
    out_.flush();
  }
}

// --- Frozen cache ------------------------------------------------------------------

FrozenCache build_frozen_cache(ThinModel& model, const Subset& data,
                               std::size_t batch_size) {
  FrozenCache cache;
  if (model.exo.empty()) return cache;
  cache.count = data.count;
  for (auto& stack : model.exo) {
    (void)stack;
    cache.h.emplace_back();
    cache.dim.push_back(0);
  }
  for (std::size_t start = 0; start < data.count; start += batch_size) {
    const std::size_t n = std::min(batch_size, data.count - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    Batch b = gather_batch(data, idx);
    for (std::size_t s = 0; s < model.exo.size(); ++s) {
      Tensor h = model.exo[s]->represent(b.images);
      if (cache.dim[s] == 0) {
        cache.dim[s] = h.dim(1);
        cache.h[s].resize(data.count * cache.dim[s]);
      }
      for (std::size_t i = 0; i < h.size(); ++i)
        cache.h[s][start * cache.dim[s] + i] = static_cast<float>(h.values()[i]);
    }
  }
  return cache;
}

void FrozenCache::attach(ThinModel& model, Batch& batch,
                         const std::vector<std::size_t>& idx) const {
  if (empty()) return;
  batch.h_exo_cached.clear();
  for (std::size_t s = 0; s < h.size(); ++s) {
    Tensor t = Tensor::zeros({idx.size(), dim[s]});
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < dim[s]; ++k)
        t.values()[i * dim[s] + k] = h[s][idx[i] * dim[s] + k];
    batch.h_exo_cached.push_back(std::move(t));
  }
  const ExoFactor pf = primary_factor(model.config().dataset);
  for (std::size_t s = 0; s < model.exo.size(); ++s)
    if (model.exo[s]->factor == pf) {
      batch.z_exo_exo_cached =
          model.exo[s]->classify_frozen(batch.h_exo_cached[s]);
      break;
    }
}

// --- Evaluation -----------------------------------------------------------------------

EvalResult evaluate(ThinModel& model, const Subset& data,
                    std::size_t batch_size) {
  NoGradGuard ng;
  const std::size_t K = model.n_classes();
  EvalResult r;
  r.per_class.assign(K, 0.0);
  r.confusion.assign(K, std::vector<int>(K, 0));
  std::vector<std::size_t> class_total(K, 0);
  const ExoFactor pf = primary_factor(model.config().dataset);
  const bool with_cos = model.has_stack(pf);
  double entropy = 0.0, loss = 0.0;
  std::size_t correct = 0;

  for (std::size_t start = 0; start < data.count; start += batch_size) {
    const std::size_t n = std::min(batch_size, data.count - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    Batch b = gather_batch(data, idx);
    ForwardOut out = model.forward_logits(b, false);
    loss += cross_entropy(out.z, one_hot(b.labels, K)).item() *
            static_cast<double>(n);

    const std::size_t L = out.g.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = &out.z.values()[i * K];
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      const int truth = b.labels[i];
      ++class_total[truth];
      ++r.confusion[truth][best];
      if (static_cast<int>(best) == truth) {
        ++correct;
        r.per_class[truth] += 1.0;
      }
      double hrow = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        const double g = out.g.values()[i * L + l];
        if (g > 0.0) hrow -= g * std::log(g);
      }
      entropy += hrow;
    }

    if (with_cos) {
      ExoStack& stack = model.stack(pf);
      Tensor u = stack.classify_frozen(stack.represent(b.images));
      Tensor v = model.exo_logits(out.h_endo);
      const std::size_t Ke = u.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        double uv = 0.0, uu = 0.0, vv = 0.0;
        for (std::size_t k = 0; k < Ke; ++k) {
          const double a = u.values()[i * Ke + k], c = v.values()[i * Ke + k];
          uv += a * c;
          uu += a * a;
          vv += c * c;
        }
        const double denom = std::sqrt(uu) * std::sqrt(vv);
        r.abs_cos.push_back(denom < 1e-12 ? 0.0 : std::abs(uv / denom));
      }
    }
  }

  const double total = static_cast<double>(data.count);
  r.accuracy = static_cast<double>(correct) / total;
  r.gate_entropy = entropy / total;
  r.loss = loss / total;
  for (std::size_t k = 0; k < K; ++k)
    r.per_class[k] =
        class_total[k] ? r.per_class[k] / static_cast<double>(class_total[k])
                       : 0.0;
  if (with_cos && !r.abs_cos.empty()) {
    double s = 0.0;
    for (double c : r.abs_cos) s += c;
    r.mean_abs_cos = s / static_cast<double>(r.abs_cos.size());
    std::vector<double> sorted = r.abs_cos;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t mid = sorted.size() / 2;
    r.median_abs_cos = sorted.size() % 2 ? sorted[mid]
                                         : 0.5 * (sorted[mid - 1] + sorted[mid]);
  }
  return r;
}

// --- Pretraining -------------------------------------------------------------------------

PretrainResult pretrain_exogenous(ExoStack& stack, const Subset& train,
                                  const Subset& test, std::size_t epochs,
                                  std::uint64_t seed, MetricLog* log) {
  const std::vector<int>& bins = labels_for_factor(train, stack.factor);
  NamedParams params;
  stack.collect_params("exo", params);
  Adam adam(params);
  RngStream shuffle_rng(seed, "shuffle");
  const std::size_t B = 32;
  std::vector<std::size_t> order(train.count);
  std::iota(order.begin(), order.end(), 0);
  PretrainResult result;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start + B <= order.size(); start += B) {
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + start + B);
      Batch b = gather_batch(train, idx);
      std::vector<int> y(B);
      for (std::size_t i = 0; i < B; ++i) y[i] = bins[idx[i]];
      Tape tape;
      Tensor h = stack.net.forward(b.images, true);
      Tensor z = stack.classifier.forward(h, true);
      Tensor l = cross_entropy(z, one_hot(y, stack.n_classes));
      if (!std::isfinite(l.item()))
        throw NumericError("pretraining diverged at step " +
                           std::to_string(result.steps));
      tape.backward(l);
      adam.step();
      adam.zero_grad();
      ++result.steps;
      if (log && result.steps % 200 == 0)
        log->record({{"step", result.steps},
                     {"split", "pretrain/" + to_string(stack.factor)},
                     {"L", l.item()}});
    }
  }

  // Held-out metrics: bin accuracy and expected-value decoding MAE.
  {
    NoGradGuard ng;
    const std::vector<int>& test_bins = labels_for_factor(test, stack.factor);
    const std::vector<float>& values = values_for_factor(test, stack.factor);
    auto center = [&](int k) {
      return stack.factor == ExoFactor::rotation ? rotation_bin_center(k)
                                                 : scale_bin_center(k);
    };
    std::size_t correct = 0;
    double mae = 0.0;
    const std::size_t batch = 256;
    for (std::size_t start = 0; start < test.count; start += batch) {
      const std::size_t n = std::min(batch, test.count - start);
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), start);
      Batch b = gather_batch(test, idx);
      Tensor z = stack.classify_frozen(stack.represent(b.images));
      const std::size_t Ke = z.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = &z.values()[i * Ke];
        double m = row[0];
        std::size_t best = 0;
        for (std::size_t k = 1; k < Ke; ++k)
          if (row[k] > m) m = row[k], best = k;
        if (static_cast<int>(best) == test_bins[start + i]) ++correct;
        double sum = 0.0, expect = 0.0;
        for (std::size_t k = 0; k < Ke; ++k) sum += std::exp(row[k] - m);
        for (std::size_t k = 0; k < Ke; ++k)
          expect += std::exp(row[k] - m) / sum * center(static_cast<int>(k));
        mae += std::abs(expect - static_cast<double>(values[start + i]));
      }
    }
    result.bin_accuracy = static_cast<double>(correct) /
                          static_cast<double>(test.count);
    result.value_mae = mae / static_cast<double>(test.count);
  }

  stack.freeze();
  if (log)
    log->record({{"step", result.steps},
                 {"split", "pretrain_eval/" + to_string(stack.factor)},
                 {"bin_accuracy", result.bin_accuracy},
                 {"value_mae", result.value_mae}});
  return result;
}

// --- Joint training -------------------------------------------------------------------------

namespace {

struct Snapshot {
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> buffers;
};

Snapshot take_snapshot(NamedParams& params, NamedBuffers& buffers) {
  Snapshot s;
  for (auto& [name, p] : params) s.values.push_back(p.values());
  for (auto& [name, b] : buffers) s.buffers.push_back(*b);
  return s;
}

void restore_snapshot(const Snapshot& s, NamedParams& params,
                      NamedBuffers& buffers) {
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].second.values() = s.values[i];
  for (std::size_t i = 0; i < buffers.size(); ++i)
    *buffers[i].second = s.buffers[i];
}

}  // namespace

Subset subset_slice(const Subset& s, std::size_t start, std::size_t count) {
  Subset out;
  out.count = count;
  out.hw = s.hw;
  const std::size_t px = s.hw * s.hw;
  out.pixels.assign(s.pixels.begin() + start * px,
                    s.pixels.begin() + (start + count) * px);
  auto slice = [&](const auto& v, auto& dst) {
    if (!v.empty()) dst.assign(v.begin() + start, v.begin() + start + count);
  };
  slice(s.labels, out.labels);
  slice(s.rotation_class, out.rotation_class);
  slice(s.scale_class, out.scale_class);
  slice(s.rotation_deg, out.rotation_deg);
  slice(s.scale_value, out.scale_value);
  return out;
}

TrainOutcome train_model(ThinModel& model, const Subset& train_all,
                         const Subset& test, MetricLog* log,
                         const std::string& checkpoint_path,
                         const FrozenCache* shared_frozen) {
  const ExperimentConfig& cfg = model.config();
  for (auto& stack : model.exo) {
    NamedParams sp;
    stack->collect_params("exo", sp);
    for (auto& [name, p] : sp)
      if (p.requires_grad())
        throw ConfigError(
            "joint training requires pretrained frozen exogenous stacks; "
            "stack '" + to_string(stack->factor) + "' is still trainable");
  }

  const std::size_t val_size = std::min(cfg.val_size, train_all.count / 2);
  const std::size_t train_count = train_all.count - val_size;
  Subset train = subset_slice(train_all, 0, train_count);
  Subset val = subset_slice(train_all, train_count, val_size);

  NamedParams frozen;
  model.collect_frozen(frozen);
  const std::uint64_t frozen_before = params_hash(frozen);

  // A caller-provided cache must cover train_all; the training slice is a
  // prefix of it, so its row indices address the shared cache directly.
  FrozenCache local;
  const bool use_shared = shared_frozen && !shared_frozen->empty();
  if (!use_shared) local = build_frozen_cache(model, train);
  const FrozenCache& cache = use_shared ? *shared_frozen : local;

  NamedParams trainable;
  model.collect_trainable(trainable);
  NamedBuffers buffers;
  model.collect_buffers(buffers);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam adam(trainable, acfg);

  RngStream shuffle_rng(cfg.seed, "shuffle");
  std::vector<std::size_t> order(train.count);
  std::iota(order.begin(), order.end(), 0);

  TrainOutcome outcome;
  Snapshot best = take_snapshot(trainable, buffers);
  outcome.best_val_accuracy = -1.0;
  const std::size_t B = cfg.batch_size;
  std::size_t epochs_since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs && !outcome.diverged;
       ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start + B <= order.size(); start += B) {
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + start + B);
      Batch batch = gather_batch(train, idx);
      cache.attach(model, batch, idx);
      Tape tape;
      LossOut loss = compute_losses(model, batch, true);
      if (!std::isfinite(loss.total.item())) {
        outcome.diverged = true;
        break;
      }
      tape.backward(loss.total);
      adam.step();
      adam.zero_grad();
      ++outcome.steps;

      if (log && outcome.steps % 100 == 0) {
        std::size_t hit = 0;
        const std::size_t K = model.n_classes();
        for (std::size_t i = 0; i < B; ++i) {
          const double* row = &loss.fwd.z.values()[i * K];
          std::size_t bestk = 0;
          for (std::size_t k = 1; k < K; ++k)
            if (row[k] > row[bestk]) bestk = k;
          if (static_cast<int>(bestk) == batch.labels[i]) ++hit;
        }
        const std::size_t L = loss.fwd.g.dim(1);
        double ent = 0.0;
        for (std::size_t i = 0; i < B * L; ++i) {
          const double g = loss.fwd.g.values()[i];
          if (g > 0.0) ent -= g * std::log(g);
        }
        log->record({{"step", outcome.steps},
                     {"split", "train"},
                     {"accuracy", static_cast<double>(hit) /
                                      static_cast<double>(B)},
                     {"L", loss.total.item()},
                     {"L_sup", loss.sup.item()},
                     {"L_sim", loss.sim.item()},
                     {"gate_entropy", ent / static_cast<double>(B)}});
      }
    }

    EvalResult vr = evaluate(model, val);
    if (log)
      log->record({{"step", outcome.steps},
                   {"split", "val"},
                   {"accuracy", vr.accuracy},
                   {"L", vr.loss},
                   {"L_sup", vr.loss},
                   {"L_sim", vr.mean_abs_cos < 0 ? 0.0 : vr.mean_abs_cos},
                   {"gate_entropy", vr.gate_entropy}});
    if (vr.accuracy > outcome.best_val_accuracy) {
      outcome.best_val_accuracy = vr.accuracy;
      outcome.best_step = outcome.steps;
      best = take_snapshot(trainable, buffers);
      epochs_since_best = 0;
    } else if (cfg.patience > 0 && ++epochs_since_best >= cfg.patience) {
      break;
    }
  }

  restore_snapshot(best, trainable, buffers);

  NamedParams frozen_after;
  model.collect_frozen(frozen_after);
  if (params_hash(frozen_after) != frozen_before)
    throw ContractError("frozen parameters changed during joint training");

  outcome.test_eval = evaluate(model, test);
  outcome.test_accuracy = outcome.test_eval.accuracy;
  if (log)
    log->record({{"step", outcome.best_step},
                 {"split", "test"},
                 {"accuracy", outcome.test_accuracy},
                 {"L", outcome.test_eval.loss},
                 {"L_sup", outcome.test_eval.loss},
                 {"L_sim", outcome.test_eval.mean_abs_cos < 0
                               ? 0.0
                               : outcome.test_eval.mean_abs_cos},
                 {"gate_entropy", outcome.test_eval.gate_entropy}});

  if (!checkpoint_path.empty()) {
    nlohmann::json manifest;
    manifest["config"] = cfg.identity_json();
    manifest["step"] = outcome.best_step;
    manifest["metrics"] = {{"val_accuracy", outcome.best_val_accuracy},
                           {"test_accuracy", outcome.test_accuracy}};
    manifest["diverged"] = outcome.diverged;
    save_model_checkpoint(checkpoint_path, model, std::move(manifest));
  }
  return outcome;
}

}  // namespace thin
