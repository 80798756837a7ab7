#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "thin/datasets.hpp"
#include "thin/ensemble.hpp"
#include "thin/losses.hpp"

namespace thin {

// --- Optimizer ---------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed set of named parameters. An empty
/// gradient buffer counts as an all-zero gradient; a NaN gradient aborts with
/// the parameter's name.
class Adam {
 public:
  explicit Adam(NamedParams params, AdamConfig cfg = {});

  void step();
  void zero_grad();
  std::size_t t() const { return t_; }

 private:
  NamedParams params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

// --- Checkpoints --------------------------------------------------------------

// Binary checkpoint: magic "THINCKPT", u32 version, u32 manifest length, the
// manifest JSON (which carries the ordered tensor table {name, shape}), then
// the concatenated little-endian f64 payloads. Bit-exact round trip.
void save_checkpoint(const std::string& path, nlohmann::json manifest,
                     const NamedParams& params, const NamedBuffers& buffers);
// Loads values into the given tensors/buffers, matching by name and shape;
// any mismatch raises IoError. Returns the manifest.
nlohmann::json load_checkpoint(const std::string& path, NamedParams& params,
                               NamedBuffers& buffers);

// Convenience: full model state (trainable + frozen + batch-norm buffers).
void save_model_checkpoint(const std::string& path, ThinModel& model,
                           nlohmann::json manifest);
nlohmann::json load_model_checkpoint(const std::string& path,
                                     ThinModel& model);

// 64-bit FNV-1a over all parameter bytes, for freezing/determinism checks.
std::uint64_t params_hash(const NamedParams& params);

// --- Metric log ----------------------------------------------------------------

/// JSON-lines writer; one record per eval point. A null path keeps records
/// in memory only (tests).
class MetricLog {
 public:
  MetricLog() = default;
  explicit MetricLog(const std::string& path);
  void record(const nlohmann::json& j);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::ofstream out_;
  std::vector<nlohmann::json> records_;
};

// --- Frozen-activation cache ----------------------------------------------------

/// Per-sample activations of the frozen exogenous stacks over one subset,
/// so joint training does not re-run the frozen convnets every step.
/// Features are stored f32; the dispelling reference is recomputed from them
/// per batch by the frozen classifier.
struct FrozenCache {
  std::vector<std::vector<float>> h;  // [stack][count * feat_dim]
  std::vector<std::size_t> dim;       // feature width per stack
  std::size_t count = 0;

  bool empty() const { return h.empty(); }
  // Fills batch.h_exo_cached (and z_exo_exo_cached via the frozen
  // classifier) for the given sample indices.
  void attach(ThinModel& model, Batch& batch,
              const std::vector<std::size_t>& idx) const;
};

FrozenCache build_frozen_cache(ThinModel& model, const Subset& data,
                               std::size_t batch_size = 256);

// --- Evaluation -------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;            // recall per true class
  std::vector<std::vector<int>> confusion;  // [true][pred]
  double gate_entropy = 0.0;                // mean nats
  double mean_abs_cos = -1.0;               // -1 when no dispelling stack
  double median_abs_cos = -1.0;
  std::vector<double> abs_cos;              // per-sample values
  double loss = 0.0;                        // mean supervised CE
};

EvalResult evaluate(ThinModel& model, const Subset& data,
                    std::size_t batch_size = 256);

// --- Training -------------------------------------------------------------------

struct PretrainResult {
  double bin_accuracy = 0.0;  // held-out accuracy on the factor bins
  double value_mae = 0.0;     // expected-value decoding vs the true value
  std::size_t steps = 0;
};

/// Stage one: trains stack.net + stack.classifier on the factor bins with
/// cross-entropy, then freezes the stack. Reports test bin accuracy and the
/// bin-center expected-value MAE in the factor's native units.
PretrainResult pretrain_exogenous(ExoStack& stack, const Subset& train,
                                  const Subset& test, std::size_t epochs,
                                  std::uint64_t seed, MetricLog* log = nullptr);

struct TrainOutcome {
  double best_val_accuracy = 0.0;
  std::size_t best_step = 0;
  double test_accuracy = 0.0;
  EvalResult test_eval;
  std::size_t steps = 0;
  bool diverged = false;
};

/// Stage two: joint training of the trainable parts over shuffled batches,
/// with a validation slice carved from the tail of the train subset,
/// best-validation model selection, and a single final test evaluation.
/// Logs one record per eval point; saves the selected model to
/// checkpoint_path when non-empty.
// `shared_frozen` (optional) is a prebuilt frozen-activation cache over
// train_all; when null (or empty) the trainer builds its own.
TrainOutcome train_model(ThinModel& model, const Subset& train_all,
                         const Subset& test, MetricLog* log = nullptr,
                         const std::string& checkpoint_path = "",
                         const FrozenCache* shared_frozen = nullptr);

// A contiguous copy of [start, start+count) rows of a subset.
Subset subset_slice(const Subset& s, std::size_t start, std::size_t count);

}  // namespace thin
