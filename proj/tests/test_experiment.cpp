#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "thin/experiment.hpp"

using namespace thin;
namespace fs = std::filesystem;

namespace {

std::string data_dir() {
  const char* env = std::getenv("THIN_DATA_DIR");
  if (env) return env;
#ifdef THIN_TEST_DATA_DIR
  return THIN_TEST_DATA_DIR;
#else
  return "data/mnist";
#endif
}

// Fresh scratch output tree for this test process.
const std::string& scratch_out() {
  static const std::string dir = [] {
    std::string d = (fs::temp_directory_path() / "thin_experiment_tests").string();
    fs::remove_all(d);
    return d;
  }();
  return dir;
}

Runner make_runner() {
  RunPaths paths;
  paths.out_dir = scratch_out();
  paths.data_dir = data_dir();
  return Runner(paths);
}

// Installs an (untrained) frozen-stack checkpoint + record so exo-variant
// runs can proceed without paying a real pretraining pass.
PretrainRecord plant_pretrain(Runner& r, Dataset d, ExoFactor f) {
  const std::size_t epochs = r.pretrain_epochs(d);
  const std::string key = to_string(d) + "_" + to_string(f) + "_e" +
                          std::to_string(epochs) + "_s" +
                          std::to_string(Runner::kPretrainSeed);
  const std::string dir = r.paths().pretrain_dir(key);
  fs::create_directories(dir);

  RngStream rng(Runner::kPretrainSeed, "exo_init");
  ExoStack stack(f, image_hw(d), exo_classes(d, f), rng);
  NamedParams ps;
  stack.collect_params("exo_" + to_string(f), ps);
  NamedBuffers bs;
  stack.collect_buffers("exo_" + to_string(f), bs);

  PretrainRecord rec;
  rec.dataset = d;
  rec.factor = f;
  rec.epochs = epochs;
  rec.seed = Runner::kPretrainSeed;
  rec.bin_accuracy = 0.123;
  rec.value_mae = 45.0;
  rec.checkpoint = dir + "/checkpoint.bin";
  save_checkpoint(rec.checkpoint, rec.to_json(), ps, bs);
  std::ofstream(dir + "/result.json") << rec.to_json().dump(2) << "\n";
  return rec;
}

ExperimentConfig tiny(Variant v, Dataset d = Dataset::mnist_r) {
  ExperimentConfig cfg;
  cfg.dataset = d;
  cfg.variant = v;
  cfg.seed = 1;
  cfg.epochs = 1;
  cfg.train_limit = 512;
  cfg.test_limit = 256;
  cfg.finalize();
  return cfg;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("sha256 matches the published test vector") {
  // FIPS 180-2 appendix B.1: SHA-256("abc").
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("run digest: stable, canonical, and sensitive") {
  ExperimentConfig a = tiny(Variant::baseline);
  CHECK(run_digest(a) == run_digest(a));
  CHECK(run_digest(a).size() == 64);
  CHECK(run_digest(a) == sha256_hex(a.identity_json().dump()));

  ExperimentConfig b = a;
  b.seed = 2;
  CHECK(run_digest(a) != run_digest(b));

  ExperimentConfig c = a;
  c.test_limit = 0;
  CHECK(run_digest(a) != run_digest(c));

  // An explicitly restated default source resolves to the same identity.
  ExperimentConfig d = tiny(Variant::exo_tree_gated);
  ExperimentConfig e;
  e.dataset = Dataset::mnist_r;
  e.variant = Variant::exo_tree_gated;
  e.gating_source = GatingSource::exogenous_rotation;
  e.gating_source_explicit = true;
  e.seed = 1;
  e.epochs = 1;
  e.train_limit = 512;
  e.test_limit = 256;
  CHECK(run_digest(d) == run_digest(e));
}

TEST_CASE("config identity round-trips through json for every variant") {
  for (Variant v : {Variant::baseline, Variant::simple_ensemble,
                    Variant::tree_gated, Variant::exo_tree_gated,
                    Variant::oracle, Variant::thin}) {
    ExperimentConfig cfg;
    cfg.dataset = Dataset::mnist_r;
    cfg.variant = v;
    cfg.seed = 7;
    cfg.finalize();
    ExperimentConfig back = ExperimentConfig::from_json(cfg.identity_json());
    CHECK(back.identity_json() == cfg.identity_json());
  }
  // Non-default gating source survives the round trip.
  ExperimentConfig cfg;
  cfg.dataset = Dataset::mnist_rs;
  cfg.variant = Variant::exo_tree_gated;
  cfg.gating_source = GatingSource::exogenous_scale;
  cfg.gating_source_explicit = true;
  cfg.finalize();
  ExperimentConfig back = ExperimentConfig::from_json(cfg.identity_json());
  CHECK(back.gating_source == GatingSource::exogenous_scale);
  CHECK(back.identity_json() == cfg.identity_json());
}

TEST_CASE("run and pretrain records round-trip through json") {
  RunRecord r;
  r.digest = "abc";
  r.config = {{"variant", "thin"}};
  r.test_accuracy = 0.91;
  r.best_val_accuracy = 0.93;
  r.best_step = 120;
  r.steps = 200;
  r.test_loss = 0.3;
  r.gate_entropy = 1.2;
  r.mean_abs_cos = 0.21;
  r.median_abs_cos = 0.18;
  r.trainable_params = 1000;
  r.frozen_params = 2000;
  r.wall_seconds = 12.5;
  r.diverged = false;
  RunRecord r2 = RunRecord::from_json(r.to_json());
  CHECK(r2.to_json() == r.to_json());

  PretrainRecord p;
  p.dataset = Dataset::dsprites_synth;
  p.factor = ExoFactor::scale;
  p.epochs = 3;
  p.seed = 1;
  p.bin_accuracy = 0.8;
  p.value_mae = 0.02;
  p.wall_seconds = 33.0;
  p.checkpoint = "x/checkpoint.bin";
  PretrainRecord p2 = PretrainRecord::from_json(p.to_json());
  CHECK(p2.to_json() == p.to_json());
}

TEST_CASE("planted pretrain record short-circuits pretraining" *
          doctest::timeout(120)) {
  Runner r = make_runner();
  PretrainRecord planted = plant_pretrain(r, Dataset::mnist_r, ExoFactor::rotation);
  PretrainRecord got = r.pretrain(Dataset::mnist_r, ExoFactor::rotation);
  CHECK(got.bin_accuracy == doctest::Approx(planted.bin_accuracy));
  CHECK(got.value_mae == doctest::Approx(planted.value_mae));
  CHECK(got.checkpoint == planted.checkpoint);
  CHECK(fs::exists(got.checkpoint));
}

TEST_CASE("runner: tiny baseline run trains, persists, and is cache-hit on rerun" *
          doctest::timeout(300)) {
  Runner r = make_runner();
  ExperimentConfig cfg = tiny(Variant::baseline);

  CHECK_FALSE(r.cached(cfg).has_value());
  RunRecord first = r.run(cfg);
  CHECK(first.digest == run_digest(cfg));
  CHECK(first.steps == (512 - 256) / cfg.batch_size);  // one epoch, val carved off
  CHECK(first.test_accuracy > 0.0);
  CHECK(first.test_accuracy <= 1.0);
  CHECK(first.mean_abs_cos == doctest::Approx(-1.0));  // no dispelling stack
  CHECK(first.trainable_params > 0);
  CHECK(first.frozen_params == 0);

  const std::string dir = r.paths().run_dir(first.digest);
  CHECK(fs::exists(dir + "/config.json"));
  CHECK(fs::exists(dir + "/checkpoint.bin"));
  CHECK(fs::exists(dir + "/metrics.jsonl"));
  CHECK(fs::exists(dir + "/result.json"));

  RunRecord again = r.run(cfg);  // must come from the result.json cache
  CHECK(again.test_accuracy == doctest::Approx(first.test_accuracy));
  CHECK(again.wall_seconds == doctest::Approx(first.wall_seconds));
  CHECK(r.cached(cfg).has_value());
}

TEST_CASE("runner: exo run uses planted stack and introspect writes exports" *
          doctest::timeout(300)) {
  Runner r = make_runner();
  plant_pretrain(r, Dataset::mnist_r, ExoFactor::rotation);
  ExperimentConfig cfg = tiny(Variant::exo_tree_gated);
  RunRecord rec = r.run(cfg);
  CHECK(rec.frozen_params > 0);
  CHECK(rec.mean_abs_cos >= 0.0);
  CHECK(rec.mean_abs_cos <= 1.0);
  CHECK(rec.gate_entropy >= 0.0);
  CHECK(fs::exists(r.paths().run_dir(rec.digest) + "/exports/cos_hist.json"));

  nlohmann::json summary = introspect(r, rec.digest, "test");
  CHECK(summary.at("count").get<std::size_t>() == 256);
  const double acc = summary.at("accuracy").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  // Checkpoint reload must reproduce the recorded test accuracy.
  CHECK(acc == doctest::Approx(rec.test_accuracy).epsilon(1e-12));

  const std::string ex = r.paths().run_dir(rec.digest) + "/exports";
  for (const char* f : {"cos_hist.json", "tree_nodes.json", "leaf_usage.json",
                        "embeddings.bin", "embeddings_labels.bin",
                        "embeddings_meta.json"})
    CHECK(fs::exists(ex + std::string("/") + f));

  nlohmann::json meta;
  std::ifstream(ex + "/embeddings_meta.json") >> meta;
  CHECK(meta.at("count").get<std::size_t>() == 256);
  const std::size_t dim = meta.at("dim").get<std::size_t>();
  CHECK(fs::file_size(ex + "/embeddings.bin") == 256 * dim * sizeof(float));
  CHECK(fs::file_size(ex + "/embeddings_labels.bin") == 256);

  nlohmann::json usage;
  std::ifstream(ex + "/leaf_usage.json") >> usage;
  auto mass = usage.at("mean_gate_mass").get<std::vector<double>>();
  double total = 0.0;
  for (double m : mass) total += m;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

  nlohmann::json hist;
  std::ifstream(ex + "/cos_hist.json") >> hist;
  std::size_t count = 0;
  for (const auto& c : hist.at("counts")) count += c.get<std::size_t>();
  CHECK(count == 256);

  CHECK_THROWS_AS(introspect(r, "deadbeef", "test"), ConfigError);
  CHECK_THROWS_AS(introspect(r, rec.digest, "weird"), ConfigError);
}

TEST_CASE("ladder: tiny battery aggregates all six variants" *
          doctest::timeout(600)) {
  Runner r = make_runner();
  plant_pretrain(r, Dataset::mnist_r, ExoFactor::rotation);
  nlohmann::json table = ladder(r, Dataset::mnist_r, {1}, 1, 512, 256);

  REQUIRE(table.at("rows").size() == 6);
  for (const auto& row : table.at("rows")) {
    INFO(row.dump());
    CHECK_FALSE(row.at("failed").get<bool>());
    CHECK(row.at("mean_accuracy_pct").get<double>() > 0.0);
    CHECK(row.at("runs").size() == 1);
  }
  CHECK(table.at("rows")[0].at("label") == "baseline");
  CHECK(table.at("rows")[5].at("label") == "thin");
  CHECK(table.contains("orderings"));
  CHECK(table.at("orderings").contains("gap_thin_minus_baseline_pct"));
  CHECK(fs::exists(r.paths().table_dir() + "/ladder_mnist_r.json"));

  const std::string text = format_table(table);
  CHECK(text.find("baseline") != std::string::npos);
  CHECK(text.find("thin") != std::string::npos);
  CHECK(text.find("orderings") != std::string::npos);
}

TEST_CASE("gradcheck battery: every op verified, corrupted op caught" *
          doctest::timeout(600)) {
  std::vector<GradcheckEntry> entries = gradcheck_battery(true);
  REQUIRE(entries.size() >= 20);
  bool saw_negative = false;
  for (const auto& e : entries) {
    INFO(e.op << " max_rel_err=" << e.max_rel_err << " checked=" << e.checked);
    CHECK(e.pass);
    if (e.op == "negative_control") {
      saw_negative = true;
    } else {
      CHECK(e.checked > 0);
    }
  }
  CHECK(saw_negative);
  CHECK(gradcheck_all_passed(entries));
  CHECK_FALSE(gradcheck_all_passed({}));
}

}  // TEST_SUITE
