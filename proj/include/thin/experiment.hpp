#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "thin/trainer.hpp"

namespace thin {

// Hex SHA-256 of a byte string (the run digest is the hash of the canonical
// config identity JSON).
std::string sha256_hex(const std::string& bytes);
std::string run_digest(const ExperimentConfig& cfg);

/// Where a run battery keeps its artifacts:
///   <out_dir>/runs/<digest>/{config.json, checkpoint.bin, metrics.jsonl,
///                            result.json, exports/}
///   <out_dir>/pretrains/<key>/{checkpoint.bin, result.json}
///   <out_dir>/tables/*.json
struct RunPaths {
  std::string out_dir = "out";
  std::string data_dir;  // MNIST IDX directory (THIN_DATA_DIR fallback)

  std::string run_dir(const std::string& digest) const;
  std::string pretrain_dir(const std::string& key) const;
  std::string table_dir() const;
};

/// Summary row persisted as result.json; everything acceptance needs without
/// re-opening checkpoints.
struct RunRecord {
  std::string digest;
  nlohmann::json config;  // identity json
  double test_accuracy = 0.0;
  double best_val_accuracy = 0.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  double test_loss = 0.0;
  double gate_entropy = 0.0;
  double mean_abs_cos = -1.0;    // -1 when the run has no dispelling stack
  double median_abs_cos = -1.0;
  std::size_t trainable_params = 0;
  std::size_t frozen_params = 0;
  double wall_seconds = 0.0;
  bool diverged = false;

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

struct PretrainRecord {
  Dataset dataset = Dataset::mnist_r;
  ExoFactor factor = ExoFactor::rotation;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double bin_accuracy = 0.0;
  double value_mae = 0.0;
  double wall_seconds = 0.0;
  std::string checkpoint;  // path of the frozen-stack weights

  nlohmann::json to_json() const;
  static PretrainRecord from_json(const nlohmann::json& j);
};

/// Executes runs with on-disk caching: a digest directory holding a complete
/// result.json is trusted and never re-trained. Datasets and frozen-stack
/// activations are cached in-process so a battery of runs over one dataset
/// pays dataset construction and frozen forward passes once.
class Runner {
 public:
  explicit Runner(RunPaths paths);

  // Per-dataset pretraining schedule for the frozen stacks (ledger: chosen
  // for the single-core budget; more epochs only sharpen the stacks).
  std::size_t pretrain_epochs(Dataset d) const;
  void set_pretrain_epochs(std::size_t mnist, std::size_t dsprites);

  // Stage-one cache: trains (or loads) the frozen stack for (dataset,
  // factor) at the fixed pretrain seed and returns its record.
  PretrainRecord pretrain(Dataset d, ExoFactor f);

  // Stage two: the full pipeline for one config. `progress` (when non-null)
  // receives one line per lifecycle event.
  RunRecord run(ExperimentConfig cfg);

  // Cached dataset access (built at generation seed 1, the pinned corpus).
  const DatasetSplit& data(Dataset d);
  // Drops cached datasets/caches for all datasets but `keep` (RAM bound).
  void evict_except(Dataset keep);

  const RunPaths& paths() const { return paths_; }

  // Loads the RunRecord for a config if it is already complete on disk.
  std::optional<RunRecord> cached(const ExperimentConfig& cfg) const;

  void set_progress(std::FILE* f) { progress_ = f; }

  static constexpr std::uint64_t kPretrainSeed = 1;
  static constexpr std::uint64_t kDataSeed = 1;

 private:
  void note(const std::string& line);
  // Loads pretrained weights into every stack of the model, freezing them.
  void prepare_stacks(ThinModel& model);
  // Frozen-activation cache over the full train subset of cfg's dataset,
  // shared by all runs with the same (dataset, limit, stack set).
  const FrozenCache* shared_cache(ThinModel& model, const Subset& train);

  RunPaths paths_;
  std::size_t pretrain_epochs_mnist_ = 5;
  std::size_t pretrain_epochs_dsprites_ = 3;
  std::map<Dataset, DatasetSplit> data_;
  std::string cache_key_;
  FrozenCache cache_;
  std::FILE* progress_ = nullptr;
};

// --- Batteries -----------------------------------------------------------------

// Six-variant comparison on one dataset: per-variant mean/std over seeds plus
// ordering flags. Writes tables/ladder_<dataset>.json and returns the table.
// The limits cap the train/test subsets (0 = full; smoke runs only).
nlohmann::json ladder(Runner& r, Dataset d, const std::vector<std::uint64_t>& seeds,
                      std::size_t epochs, std::size_t train_limit = 0,
                      std::size_t test_limit = 0);

// Four gating sources on mnist_rs at lambda=0 (endogenous / scale / rotation
// / concatenated), mean over seeds, with the ordering flag.
nlohmann::json gating_compare(Runner& r, const std::vector<std::uint64_t>& seeds,
                              std::size_t epochs, std::size_t train_limit = 0,
                              std::size_t test_limit = 0);

// Dispelling-weight sweep: one row per lambda (0 maps to the exo_tree_gated
// ablation), mean accuracy and mean |cos| over seeds.
nlohmann::json sweep_lambda(Runner& r, Dataset d, const std::vector<double>& lambdas,
                            const std::vector<std::uint64_t>& seeds,
                            std::size_t epochs, std::size_t train_limit = 0,
                            std::size_t test_limit = 0);

// Fixed-width text rendering of any of the three tables above.
std::string format_table(const nlohmann::json& table);

// --- Introspection ---------------------------------------------------------------

// Loads the run's checkpoint, evaluates `split` (train|test), and writes
// exports/ under the digest directory:
//   cos_hist.json   50-bin histogram of |cos| on [0,1] (when applicable)
//   tree_nodes.json per-node top-16 sample indices by routing probability
//                   and mean exogenous value among routed samples
//   leaf_usage.json mean gate mass and argmax counts per leaf, entropy
//   embeddings.bin  raw f32 h_endo rows (+ embeddings_meta.json, labels)
// Returns a summary of what was written.
nlohmann::json introspect(Runner& r, const std::string& digest,
                          const std::string& split);

// --- Gradient-check battery --------------------------------------------------------

struct GradcheckEntry {
  std::string op;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool pass = false;
};

// Runs finite-difference checks over every differentiable op and an
// end-to-end model graph. When `negative_control` is set, also runs a
// deliberately corrupted backward and reports it under "negative_control"
// with pass = true iff the corruption was DETECTED (check failed).
std::vector<GradcheckEntry> gradcheck_battery(bool negative_control);
bool gradcheck_all_passed(const std::vector<GradcheckEntry>& entries);

}  // namespace thin
