#include "thin/config.hpp"

#include <cmath>

namespace thin {

std::string to_string(Dataset d) {
  switch (d) {
    case Dataset::mnist_r: return "mnist_r";
    case Dataset::mnist_rs: return "mnist_rs";
    case Dataset::dsprites_synth: return "dsprites_synth";
  }
  throw ConfigError("bad dataset enum");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::simple_ensemble: return "simple_ensemble";
    case Variant::tree_gated: return "tree_gated";
    case Variant::exo_tree_gated: return "exo_tree_gated";
    case Variant::oracle: return "oracle";
    case Variant::thin: return "thin";
  }
  throw ConfigError("bad variant enum");
}

std::string to_string(GatingSource s) {
  switch (s) {
    case GatingSource::endogenous: return "endogenous";
    case GatingSource::exogenous_rotation: return "exogenous_rotation";
    case GatingSource::exogenous_scale: return "exogenous_scale";
    case GatingSource::exo_concat: return "exo_concat";
    case GatingSource::oracle_onehot: return "oracle_onehot";
  }
  throw ConfigError("bad gating source enum");
}

std::string to_string(ExoFactor f) {
  return f == ExoFactor::rotation ? "rotation" : "scale";
}

Dataset dataset_from_string(const std::string& s) {
  if (s == "mnist_r") return Dataset::mnist_r;
  if (s == "mnist_rs") return Dataset::mnist_rs;
  if (s == "dsprites_synth") return Dataset::dsprites_synth;
  throw ConfigError("unknown dataset '" + s +
                    "' (want mnist_r | mnist_rs | dsprites_synth)");
}

Variant variant_from_string(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "simple_ensemble") return Variant::simple_ensemble;
  if (s == "tree_gated") return Variant::tree_gated;
  if (s == "exo_tree_gated") return Variant::exo_tree_gated;
  if (s == "oracle") return Variant::oracle;
  if (s == "thin") return Variant::thin;
  throw ConfigError("unknown variant '" + s +
                    "' (want baseline | simple_ensemble | tree_gated | "
                    "exo_tree_gated | oracle | thin)");
}

GatingSource gating_source_from_string(const std::string& s) {
  if (s == "endogenous") return GatingSource::endogenous;
  if (s == "exogenous_rotation") return GatingSource::exogenous_rotation;
  if (s == "exogenous_scale") return GatingSource::exogenous_scale;
  if (s == "exo_concat") return GatingSource::exo_concat;
  if (s == "oracle_onehot") return GatingSource::oracle_onehot;
  throw ConfigError("unknown gating source '" + s + "'");
}

ExoFactor exo_factor_from_string(const std::string& s) {
  if (s == "rotation") return ExoFactor::rotation;
  if (s == "scale") return ExoFactor::scale;
  throw ConfigError("unknown exogenous factor '" + s +
                    "' (want rotation | scale)");
}

std::size_t task_classes(Dataset d) {
  return d == Dataset::dsprites_synth ? 3 : 10;
}

std::size_t image_hw(Dataset d) {
  return d == Dataset::dsprites_synth ? 64 : 28;
}

bool dataset_has_factor(Dataset d, ExoFactor f) {
  switch (d) {
    case Dataset::mnist_r: return f == ExoFactor::rotation;
    case Dataset::mnist_rs: return true;
    case Dataset::dsprites_synth: return f == ExoFactor::scale;
  }
  return false;
}

std::size_t exo_classes(Dataset d, ExoFactor f) {
  if (!dataset_has_factor(d, f))
    throw ConfigError("dataset " + to_string(d) + " has no " + to_string(f) +
                      " label");
  return f == ExoFactor::rotation ? 18 : 10;
}

ExoFactor primary_factor(Dataset d) {
  return d == Dataset::dsprites_synth ? ExoFactor::scale : ExoFactor::rotation;
}

void ExperimentConfig::finalize() {
  if (!gating_source_explicit) {
    switch (variant) {
      case Variant::baseline:
      case Variant::simple_ensemble:
      case Variant::tree_gated:
        gating_source = GatingSource::endogenous;
        break;
      case Variant::exo_tree_gated:
      case Variant::thin:
        gating_source = primary_factor(dataset) == ExoFactor::rotation
                            ? GatingSource::exogenous_rotation
                            : GatingSource::exogenous_scale;
        break;
      case Variant::oracle:
        gating_source = GatingSource::oracle_onehot;
        break;
    }
  }
  if (lambda < 0.0)
    lambda = variant == Variant::thin ? 0.005 : 0.0;

  if (!std::isfinite(lambda))
    throw ConfigError("lambda must be finite");
  if (variant == Variant::thin && lambda <= 0.0)
    throw ConfigError("variant thin requires lambda > 0 (got " +
                      std::to_string(lambda) + "); use exo_tree_gated for "
                      "the lambda=0 ablation");
  if (variant == Variant::oracle &&
      gating_source != GatingSource::oracle_onehot)
    throw ConfigError("variant oracle requires gating_source oracle_onehot");
  if ((variant == Variant::exo_tree_gated || variant == Variant::thin) &&
      (gating_source == GatingSource::endogenous ||
       gating_source == GatingSource::oracle_onehot))
    throw ConfigError("variant " + to_string(variant) +
                      " requires an exogenous gating source");
  if (gating_source == GatingSource::exogenous_rotation &&
      !dataset_has_factor(dataset, ExoFactor::rotation))
    throw ConfigError("gating on rotation but " + to_string(dataset) +
                      " carries no rotation label");
  if (gating_source == GatingSource::exogenous_scale &&
      !dataset_has_factor(dataset, ExoFactor::scale))
    throw ConfigError("gating on scale but " + to_string(dataset) +
                      " carries no scale label");
  if (gating_source == GatingSource::exo_concat &&
      dataset != Dataset::mnist_rs)
    throw ConfigError("exo_concat gating needs both factors (mnist_rs only)");
  if (variant == Variant::baseline || variant == Variant::simple_ensemble) {
    // Explicitly restating the resolved default (endogenous) is harmless and
    // keeps identity JSON round-trips valid for gateless variants.
    if (gating_source_explicit && gating_source != GatingSource::endogenous)
      throw ConfigError("variant " + to_string(variant) +
                        " takes no gating source");
  }
  if (n_experts != ((std::size_t)1 << tree_depth))
    throw ConfigError("n_experts must equal 2^tree_depth (" +
                      std::to_string(n_experts) + " vs depth " +
                      std::to_string(tree_depth) + ")");
  if (batch_size < 2)
    throw ConfigError("batch_size must be >= 2 for batch statistics");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
}

nlohmann::json ExperimentConfig::identity_json() const {
  // nlohmann::json objects iterate in sorted key order, which makes the
  // dump canonical.
  nlohmann::json j;
  j["config_version"] = 1;
  j["dataset"] = to_string(dataset);
  j["variant"] = to_string(variant);
  j["gating_source"] = to_string(gating_source);
  j["lambda"] = lambda;
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["n_experts"] = n_experts;
  j["tree_depth"] = tree_depth;
  j["val_size"] = val_size;
  j["patience"] = patience;
  j["train_limit"] = train_limit;
  j["test_limit"] = test_limit;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.dataset = dataset_from_string(j.at("dataset").get<std::string>());
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.gating_source =
      gating_source_from_string(j.at("gating_source").get<std::string>());
  c.gating_source_explicit = true;
  c.lambda = j.at("lambda").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.n_experts = j.at("n_experts").get<std::size_t>();
  c.tree_depth = j.at("tree_depth").get<std::size_t>();
  c.val_size = j.at("val_size").get<std::size_t>();
  c.patience = j.value("patience", std::size_t{0});
  c.train_limit = j.value("train_limit", std::size_t{0});
  c.test_limit = j.value("test_limit", std::size_t{0});
  c.finalize();
  return c;
}

}  // namespace thin
