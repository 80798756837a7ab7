// thin — command-line front end for the THIN experiment pipeline.
//
// Exit codes: 0 success, 1 run failure (I/O, numerics, training), 2 bad
// configuration or command line.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "thin/experiment.hpp"

namespace fs = std::filesystem;
using namespace thin;

namespace {

struct CommonArgs {
  std::string data_dir;
  std::string out_dir = "out";
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--data-dir", a.data_dir,
                  "MNIST IDX directory (default: $THIN_DATA_DIR or data/mnist)");
  cmd->add_option("--out-dir", a.out_dir, "Artifact root directory")
      ->capture_default_str();
  cmd->add_option("--jobs", a.jobs,
                  "Worker count (runs execute sequentially in this build; "
                  "values > 1 are accepted for interface compatibility)")
      ->capture_default_str();
}

Runner make_runner(const CommonArgs& a) {
  RunPaths paths;
  paths.out_dir = a.out_dir;
  paths.data_dir = a.data_dir;
  Runner r(paths);
  r.set_progress(stderr);
  if (a.jobs > 1)
    std::fprintf(stderr,
                 "note: --jobs=%zu requested; this build runs jobs "
                 "sequentially\n",
                 a.jobs);
  return r;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    const std::string tok =
        csv.substr(pos, comma == std::string::npos ? std::string::npos
                                                   : comma - pos);
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (seeds.empty()) throw ConfigError("--seeds parsed to an empty list");
  return seeds;
}

std::size_t battery_epochs(Dataset d, std::size_t requested) {
  if (requested > 0) return requested;
  return d == Dataset::dsprites_synth ? 6 : 18;
}

int run_generate_data(const std::string& dataset, std::uint64_t seed,
                      const CommonArgs& a) {
  std::vector<Dataset> targets;
  if (dataset == "all")
    targets = {Dataset::mnist_r, Dataset::mnist_rs, Dataset::dsprites_synth};
  else
    targets = {dataset_from_string(dataset)};

  std::string data_dir = a.data_dir;
  if (data_dir.empty()) {
    const char* e = std::getenv("THIN_DATA_DIR");
    data_dir = e ? e : "data/mnist";
  }
  const std::string dir = a.out_dir + "/datasets";
  fs::create_directories(dir);
  nlohmann::json report = nlohmann::json::array();
  for (Dataset d : targets) {
    std::fprintf(stderr, "building %s (seed %llu)\n", to_string(d).c_str(),
                 static_cast<unsigned long long>(seed));
    DatasetSplit split = build_dataset(d, seed, data_dir);
    const std::string base = dir + "/" + to_string(d) + "_s" +
                             std::to_string(seed);
    save_archive(split.train, d, seed, base + "_train.thinds");
    save_archive(split.test, d, seed, base + "_test.thinds");
    nlohmann::json entry;
    entry["dataset"] = to_string(d);
    entry["seed"] = seed;
    entry["train"] = subset_stats(split.train);
    entry["test"] = subset_stats(split.test);
    entry["train_archive"] = base + "_train.thinds";
    entry["test_archive"] = base + "_test.thinds";
    report.push_back(entry);
    std::ofstream(base + "_stats.json") << entry.dump(2) << "\n";
  }
  std::printf("%s\n", report.dump(2).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "THIN: tree-gated deep ensembles with frozen exogenous gating and a "
      "dispelling objective"};
  app.require_subcommand(1);

  // generate-data ------------------------------------------------------------
  auto* gen = app.add_subcommand("generate-data",
                                 "Build dataset archives and stats");
  CommonArgs gen_args;
  std::string gen_dataset = "all";
  std::uint64_t gen_seed = Runner::kDataSeed;
  gen->add_option("--dataset", gen_dataset,
                  "mnist_r|mnist_rs|dsprites_synth|all")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generation seed")->capture_default_str();
  add_common(gen, gen_args);

  // pretrain-exo ---------------------------------------------------------------
  auto* pre = app.add_subcommand(
      "pretrain-exo", "Pretrain and freeze the exogenous factor stacks");
  CommonArgs pre_args;
  std::string pre_dataset;
  std::string pre_factor = "all";
  std::size_t pre_epochs = 0;
  pre->add_option("--dataset", pre_dataset, "mnist_r|mnist_rs|dsprites_synth")
      ->required();
  pre->add_option("--factor", pre_factor, "rotation|scale|all")
      ->capture_default_str();
  pre->add_option("--epochs", pre_epochs,
                  "Override the pretraining schedule (0 = default)");
  add_common(pre, pre_args);

  // train ---------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train one configuration");
  CommonArgs train_args;
  ExperimentConfig tcfg;
  std::string train_dataset, train_variant, train_gating;
  train->add_option("--dataset", train_dataset,
                    "mnist_r|mnist_rs|dsprites_synth")
      ->required();
  train->add_option("--variant", train_variant,
                    "baseline|simple_ensemble|tree_gated|exo_tree_gated|"
                    "oracle|thin")
      ->required();
  train->add_option("--lambda", tcfg.lambda,
                    "Dispelling weight (unset = variant default)");
  train->add_option("--gating-source", train_gating,
                    "endogenous|exogenous_rotation|exogenous_scale|exo_concat|"
                    "oracle_onehot (default: variant rule)");
  train->add_option("--seed", tcfg.seed, "Run seed")->capture_default_str();
  train->add_option("--epochs", tcfg.epochs, "Max epochs")
      ->capture_default_str();
  train->add_option("--patience", tcfg.patience,
                    "Early-stop patience in epochs (0 disables)")
      ->capture_default_str();
  train->add_option("--train-limit", tcfg.train_limit,
                    "Cap train rows (0 = full)");
  train->add_option("--test-limit", tcfg.test_limit, "Cap test rows (0 = full)");
  add_common(train, train_args);

  // eval ----------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval",
                                "Re-evaluate a finished run from its checkpoint");
  CommonArgs ev_args;
  std::string ev_digest, ev_split = "test";
  ev->add_option("--digest", ev_digest, "Run digest (hex)")->required();
  ev->add_option("--split", ev_split, "train|test")->capture_default_str();
  add_common(ev, ev_args);

  // ladder ---------------------------------------------------------------------
  auto* lad = app.add_subcommand("ladder",
                                 "Six-variant comparison on one dataset");
  CommonArgs lad_args;
  std::string lad_dataset;
  std::string lad_seeds = "1,2,3";
  std::size_t lad_epochs = 0, lad_train_limit = 0, lad_test_limit = 0;
  lad->add_option("--dataset", lad_dataset, "mnist_r|mnist_rs|dsprites_synth")
      ->required();
  lad->add_option("--seeds", lad_seeds, "Comma-separated run seeds")
      ->capture_default_str();
  lad->add_option("--epochs", lad_epochs,
                  "Max epochs (0 = schedule: 12 mnist, 6 dsprites)");
  lad->add_option("--train-limit", lad_train_limit, "Cap train rows (smoke)");
  lad->add_option("--test-limit", lad_test_limit, "Cap test rows (smoke)");
  add_common(lad, lad_args);

  // gating-compare ---------------------------------------------------------------
  auto* gat = app.add_subcommand(
      "gating-compare", "Gating-source comparison on the rotation+scale digits");
  CommonArgs gat_args;
  std::string gat_seeds = "1,2,3";
  std::size_t gat_epochs = 0, gat_train_limit = 0, gat_test_limit = 0;
  gat->add_option("--seeds", gat_seeds, "Comma-separated run seeds")
      ->capture_default_str();
  gat->add_option("--epochs", gat_epochs, "Max epochs (0 = schedule: 12)");
  gat->add_option("--train-limit", gat_train_limit, "Cap train rows (smoke)");
  gat->add_option("--test-limit", gat_test_limit, "Cap test rows (smoke)");
  add_common(gat, gat_args);

  // sweep-lambda -------------------------------------------------------------------
  auto* swp = app.add_subcommand("sweep-lambda",
                                 "Dispelling-weight sweep on one dataset");
  CommonArgs swp_args;
  std::string swp_dataset = "mnist_r";
  std::string swp_seeds = "1,2,3";
  std::vector<double> swp_lambdas(kLambdaGrid.begin(), kLambdaGrid.end());
  std::size_t swp_epochs = 0, swp_train_limit = 0, swp_test_limit = 0;
  swp->add_option("--dataset", swp_dataset, "mnist_r|mnist_rs|dsprites_synth")
      ->capture_default_str();
  swp->add_option("--lambda", swp_lambdas,
                  "Lambda values to sweep (repeatable; default: full grid)");
  swp->add_option("--seeds", swp_seeds, "Comma-separated run seeds")
      ->capture_default_str();
  swp->add_option("--epochs", swp_epochs,
                  "Max epochs (0 = schedule: 12 mnist, 6 dsprites)");
  swp->add_option("--train-limit", swp_train_limit, "Cap train rows (smoke)");
  swp->add_option("--test-limit", swp_test_limit, "Cap test rows (smoke)");
  add_common(swp, swp_args);

  // introspect ---------------------------------------------------------------------
  auto* intr = app.add_subcommand(
      "introspect", "Export gate/embedding/cosine artifacts for a finished run");
  CommonArgs intr_args;
  std::string intr_digest, intr_split = "test";
  intr->add_option("--digest", intr_digest, "Run digest (hex)")->required();
  intr->add_option("--split", intr_split, "train|test")->capture_default_str();
  add_common(intr, intr_args);

  // gradcheck ---------------------------------------------------------------------
  auto* grd = app.add_subcommand(
      "gradcheck", "Finite-difference gradient battery over every operation");
  bool grd_no_negative = false;
  grd->add_flag("--no-negative-control", grd_no_negative,
                "Skip the corrupted-backward detection entry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_generate_data(gen_dataset, gen_seed, gen_args);

    if (pre->parsed()) {
      Runner r = make_runner(pre_args);
      const Dataset d = dataset_from_string(pre_dataset);
      if (pre_epochs > 0) {
        if (d == Dataset::dsprites_synth)
          r.set_pretrain_epochs(r.pretrain_epochs(Dataset::mnist_r), pre_epochs);
        else
          r.set_pretrain_epochs(pre_epochs,
                                r.pretrain_epochs(Dataset::dsprites_synth));
      }
      std::vector<ExoFactor> factors;
      if (pre_factor == "all") {
        for (ExoFactor f : {ExoFactor::rotation, ExoFactor::scale})
          if (dataset_has_factor(d, f)) factors.push_back(f);
      } else {
        factors.push_back(exo_factor_from_string(pre_factor));
      }
      nlohmann::json out = nlohmann::json::array();
      for (ExoFactor f : factors) out.push_back(r.pretrain(d, f).to_json());
      std::printf("%s\n", out.dump(2).c_str());
      return 0;
    }

    if (train->parsed()) {
      Runner r = make_runner(train_args);
      tcfg.dataset = dataset_from_string(train_dataset);
      tcfg.variant = variant_from_string(train_variant);
      if (!train_gating.empty()) {
        tcfg.gating_source = gating_source_from_string(train_gating);
        tcfg.gating_source_explicit = true;
      }
      tcfg.finalize();
      RunRecord rec = r.run(tcfg);
      std::printf("%s\n", rec.to_json().dump(2).c_str());
      return rec.diverged ? 1 : 0;
    }

    if (ev->parsed()) {
      Runner r = make_runner(ev_args);
      const std::string dir = r.paths().run_dir(ev_digest);
      if (!fs::exists(dir + "/config.json"))
        throw ConfigError("no run directory for digest " + ev_digest);
      std::ifstream cf(dir + "/config.json");
      ExperimentConfig cfg =
          ExperimentConfig::from_json(nlohmann::json::parse(cf));
      ThinModel model = build_variant(cfg);
      load_model_checkpoint(dir + "/checkpoint.bin", model);
      for (auto& s : model.exo) s->freeze();
      const DatasetSplit& split = r.data(cfg.dataset);
      if (ev_split != "train" && ev_split != "test")
        throw ConfigError("--split must be train or test");
      const Subset& base = ev_split == "train" ? split.train : split.test;
      const std::size_t limit =
          ev_split == "train" ? cfg.train_limit : cfg.test_limit;
      Subset sliced;
      const Subset* sub = &base;
      if (limit > 0 && limit < base.count) {
        sliced = subset_slice(base, 0, limit);
        sub = &sliced;
      }
      EvalResult res = evaluate(model, *sub);
      nlohmann::json out;
      out["digest"] = ev_digest;
      out["split"] = ev_split;
      out["count"] = sub->count;
      out["accuracy"] = res.accuracy;
      out["loss"] = res.loss;
      out["gate_entropy"] = res.gate_entropy;
      out["mean_abs_cos"] = res.mean_abs_cos;
      out["median_abs_cos"] = res.median_abs_cos;
      out["per_class_recall"] = res.per_class;
      std::printf("%s\n", out.dump(2).c_str());
      return 0;
    }

    if (lad->parsed()) {
      Runner r = make_runner(lad_args);
      const Dataset d = dataset_from_string(lad_dataset);
      nlohmann::json table =
          ladder(r, d, parse_seeds(lad_seeds), battery_epochs(d, lad_epochs),
                 lad_train_limit, lad_test_limit);
      std::printf("%s", format_table(table).c_str());
      return 0;
    }

    if (gat->parsed()) {
      Runner r = make_runner(gat_args);
      nlohmann::json table = gating_compare(
          r, parse_seeds(gat_seeds),
          battery_epochs(Dataset::mnist_rs, gat_epochs), gat_train_limit,
          gat_test_limit);
      std::printf("%s", format_table(table).c_str());
      return 0;
    }

    if (swp->parsed()) {
      Runner r = make_runner(swp_args);
      const Dataset d = dataset_from_string(swp_dataset);
      nlohmann::json table = sweep_lambda(
          r, d, swp_lambdas, parse_seeds(swp_seeds),
          battery_epochs(d, swp_epochs), swp_train_limit, swp_test_limit);
      std::printf("%s", format_table(table).c_str());
      return 0;
    }

    if (intr->parsed()) {
      Runner r = make_runner(intr_args);
      nlohmann::json summary = introspect(r, intr_digest, intr_split);
      std::printf("%s\n", summary.dump(2).c_str());
      return 0;
    }

    if (grd->parsed()) {
      std::vector<GradcheckEntry> entries = gradcheck_battery(!grd_no_negative);
      for (const auto& e : entries)
        std::printf("%-20s %-4s max_rel_err=%.3e checked=%zu skipped=%zu\n",
                    e.op.c_str(), e.pass ? "ok" : "FAIL", e.max_rel_err,
                    e.checked, e.skipped);
      return gradcheck_all_passed(entries) ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
