#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "thin/errors.hpp"

namespace thin {

enum class Dataset { mnist_r, mnist_rs, dsprites_synth };
enum class Variant {
  baseline,
  simple_ensemble,
  tree_gated,
  exo_tree_gated,
  oracle,
  thin
};
enum class GatingSource {
  endogenous,
  exogenous_rotation,
  exogenous_scale,
  exo_concat,
  oracle_onehot
};
enum class ExoFactor { rotation, scale };

std::string to_string(Dataset d);
std::string to_string(Variant v);
std::string to_string(GatingSource s);
std::string to_string(ExoFactor f);
Dataset dataset_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);
GatingSource gating_source_from_string(const std::string& s);
ExoFactor exo_factor_from_string(const std::string& s);

// Task classes: 10 digits or 3 shapes.
std::size_t task_classes(Dataset d);
std::size_t image_hw(Dataset d);
// Exogenous bin count, or throws if the dataset lacks that factor.
std::size_t exo_classes(Dataset d, ExoFactor f);
bool dataset_has_factor(Dataset d, ExoFactor f);
// The factor the oracle / dispelling loss refers to on this dataset.
ExoFactor primary_factor(Dataset d);

/// Full declarative description of one training run. Everything that affects
/// the result is part of the identity (and thus the run digest); paths are
/// deliberately not.
struct ExperimentConfig {
  Dataset dataset = Dataset::mnist_r;
  Variant variant = Variant::thin;
  GatingSource gating_source = GatingSource::endogenous;
  bool gating_source_explicit = false;
  double lambda = -1.0;  // <0 = unset; finalize() fills the variant default
  std::uint64_t seed = 1;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t n_experts = 8;
  std::size_t tree_depth = 3;
  // Validation rows carved off the train tail for model selection. Must be
  // fine-grained enough to register improvements near the accuracy ceiling
  // (1/val_size resolution), or model selection picks on plateau noise.
  std::size_t val_size = 2048;
  // Early stopping: abandon training after this many epochs without a new
  // best validation accuracy (0 disables; the best model is kept either way).
  // Disabled by default: gated variants have noisier validation trajectories
  // than the plain baseline, so a shared patience truncates them mid-climb
  // and skews cross-variant comparisons. Opt in per run where wall time
  // matters more than comparability.
  std::size_t patience = 0;
  // Optional row caps on the train/test subsets (0 = full). Part of the run
  // identity; used by CI-scale fixtures.
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;

  std::string data_dir;  // excluded from identity
  std::string out_dir;   // excluded from identity

  // Fills defaults that depend on other fields, then validates; throws
  // ConfigError with a actionable message on contradiction.
  void finalize();

  // Canonical identity (sorted keys, no paths) for digesting and config.json.
  nlohmann::json identity_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

}  // namespace thin
