#include "thin/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace fs = std::filesystem;

namespace thin {

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

void write_json_atomic(const std::string& path, const nlohmann::json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp);
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw IoError(path + " is not valid JSON");
  return j;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0
                   : std::accumulate(v.begin(), v.end(), 0.0) /
                         static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

// --- Digest -----------------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr))
    throw NumericError("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string run_digest(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.finalize();
  return sha256_hex(c.identity_json().dump());
}

// --- Paths ------------------------------------------------------------------

std::string RunPaths::run_dir(const std::string& digest) const {
  return out_dir + "/runs/" + digest;
}
std::string RunPaths::pretrain_dir(const std::string& key) const {
  return out_dir + "/pretrains/" + key;
}
std::string RunPaths::table_dir() const { return out_dir + "/tables"; }

// --- Records ----------------------------------------------------------------

nlohmann::json RunRecord::to_json() const {
  return {{"digest", digest},
          {"config", config},
          {"test_accuracy", test_accuracy},
          {"best_val_accuracy", best_val_accuracy},
          {"best_step", best_step},
          {"steps", steps},
          {"test_loss", test_loss},
          {"gate_entropy", gate_entropy},
          {"mean_abs_cos", mean_abs_cos},
          {"median_abs_cos", median_abs_cos},
          {"trainable_params", trainable_params},
          {"frozen_params", frozen_params},
          {"wall_seconds", wall_seconds},
          {"diverged", diverged}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.digest = j.at("digest").get<std::string>();
  r.config = j.at("config");
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.best_val_accuracy = j.at("best_val_accuracy").get<double>();
  r.best_step = j.at("best_step").get<std::size_t>();
  r.steps = j.at("steps").get<std::size_t>();
  r.test_loss = j.at("test_loss").get<double>();
  r.gate_entropy = j.at("gate_entropy").get<double>();
  r.mean_abs_cos = j.at("mean_abs_cos").get<double>();
  r.median_abs_cos = j.at("median_abs_cos").get<double>();
  r.trainable_params = j.at("trainable_params").get<std::size_t>();
  r.frozen_params = j.at("frozen_params").get<std::size_t>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.diverged = j.at("diverged").get<bool>();
  return r;
}

nlohmann::json PretrainRecord::to_json() const {
  return {{"dataset", to_string(dataset)},
          {"factor", to_string(factor)},
          {"epochs", epochs},
          {"seed", seed},
          {"bin_accuracy", bin_accuracy},
          {"value_mae", value_mae},
          {"wall_seconds", wall_seconds},
          {"checkpoint", checkpoint}};
}

PretrainRecord PretrainRecord::from_json(const nlohmann::json& j) {
  PretrainRecord r;
  r.dataset = dataset_from_string(j.at("dataset").get<std::string>());
  r.factor = exo_factor_from_string(j.at("factor").get<std::string>());
  r.epochs = j.at("epochs").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.bin_accuracy = j.at("bin_accuracy").get<double>();
  r.value_mae = j.at("value_mae").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  return r;
}

// --- Runner -------------------------------------------------------------------

Runner::Runner(RunPaths paths) : paths_(std::move(paths)) {
  if (paths_.data_dir.empty()) {
    const char* e = std::getenv("THIN_DATA_DIR");
    paths_.data_dir = e ? e : "data/mnist";
  }
  fs::create_directories(paths_.out_dir + "/runs");
  fs::create_directories(paths_.out_dir + "/pretrains");
  fs::create_directories(paths_.table_dir());
}

void Runner::note(const std::string& line) {
  if (progress_) {
    std::fprintf(progress_, "%s\n", line.c_str());
    std::fflush(progress_);
  }
}

std::size_t Runner::pretrain_epochs(Dataset d) const {
  return d == Dataset::dsprites_synth ? pretrain_epochs_dsprites_
                                      : pretrain_epochs_mnist_;
}

void Runner::set_pretrain_epochs(std::size_t mnist, std::size_t dsprites) {
  pretrain_epochs_mnist_ = mnist;
  pretrain_epochs_dsprites_ = dsprites;
}

const DatasetSplit& Runner::data(Dataset d) {
  auto it = data_.find(d);
  if (it != data_.end()) return it->second;
  note("building dataset " + to_string(d));
  data_.emplace(d, build_dataset(d, kDataSeed, paths_.data_dir));
  return data_.at(d);
}

void Runner::evict_except(Dataset keep) {
  for (auto it = data_.begin(); it != data_.end();)
    it = it->first == keep ? std::next(it) : data_.erase(it);
  if (cache_key_.rfind(to_string(keep) + ":", 0) != 0) {
    cache_ = FrozenCache{};
    cache_key_.clear();
  }
}

PretrainRecord Runner::pretrain(Dataset d, ExoFactor f) {
  const std::size_t epochs = pretrain_epochs(d);
  const std::string key = to_string(d) + "_" + to_string(f) + "_e" +
                          std::to_string(epochs) + "_s" +
                          std::to_string(kPretrainSeed);
  const std::string dir = paths_.pretrain_dir(key);
  const std::string result_path = dir + "/result.json";
  if (fs::exists(result_path)) return PretrainRecord::from_json(read_json(result_path));

  note("pretraining " + key);
  fs::create_directories(dir);
  const DatasetSplit& split = data(d);
  RngStream rng(kPretrainSeed, "exo_init");
  ExoStack stack(f, image_hw(d), exo_classes(d, f), rng);
  MetricLog log(dir + "/metrics.jsonl");
  const auto t0 = clock_type::now();
  PretrainResult pr =
      pretrain_exogenous(stack, split.train, split.test, epochs, kPretrainSeed, &log);

  PretrainRecord rec;
  rec.dataset = d;
  rec.factor = f;
  rec.epochs = epochs;
  rec.seed = kPretrainSeed;
  rec.bin_accuracy = pr.bin_accuracy;
  rec.value_mae = pr.value_mae;
  rec.wall_seconds = seconds_since(t0);
  rec.checkpoint = dir + "/checkpoint.bin";

  NamedParams ps;
  stack.collect_params("exo_" + to_string(f), ps);
  NamedBuffers bs;
  stack.collect_buffers("exo_" + to_string(f), bs);
  save_checkpoint(rec.checkpoint, rec.to_json(), ps, bs);
  write_json_atomic(result_path, rec.to_json());
  note("pretrained " + key + ": bin_accuracy=" + std::to_string(pr.bin_accuracy) +
       " value_mae=" + std::to_string(pr.value_mae));
  return rec;
}

void Runner::prepare_stacks(ThinModel& model) {
  for (auto& stack : model.exo) {
    PretrainRecord rec = pretrain(model.config().dataset, stack->factor);
    const std::string prefix = "exo_" + to_string(stack->factor);
    NamedParams ps;
    stack->collect_params(prefix, ps);
    NamedBuffers bs;
    stack->collect_buffers(prefix, bs);
    load_checkpoint(rec.checkpoint, ps, bs);
    stack->freeze();
  }
}

const FrozenCache* Runner::shared_cache(ThinModel& model, const Subset& train) {
  if (model.exo.empty()) return nullptr;
  std::string key = to_string(model.config().dataset) + ":" +
                    std::to_string(model.config().train_limit);
  for (auto& s : model.exo)
    key += ":" + to_string(s->factor) + "_e" +
           std::to_string(pretrain_epochs(model.config().dataset));
  if (key != cache_key_) {
    note("building frozen-activation cache (" + key + ")");
    cache_ = build_frozen_cache(model, train);
    cache_key_ = key;
  }
  return &cache_;
}

std::optional<RunRecord> Runner::cached(const ExperimentConfig& cfg) const {
  const std::string path = paths_.run_dir(run_digest(cfg)) + "/result.json";
  if (!fs::exists(path)) return std::nullopt;
  return RunRecord::from_json(read_json(path));
}

RunRecord Runner::run(ExperimentConfig cfg) {
  cfg.finalize();
  const std::string digest = run_digest(cfg);
  if (auto hit = cached(cfg)) {
    note("cached " + digest.substr(0, 12) + " " + to_string(cfg.dataset) + "/" +
         to_string(cfg.variant) + " seed=" + std::to_string(cfg.seed));
    return *hit;
  }

  const std::string dir = paths_.run_dir(digest);
  fs::create_directories(dir + "/exports");
  write_json_atomic(dir + "/config.json", cfg.identity_json());
  note("run " + digest.substr(0, 12) + " " + to_string(cfg.dataset) + "/" +
       to_string(cfg.variant) + " gating=" + to_string(cfg.gating_source) +
       " lambda=" + std::to_string(cfg.lambda) +
       " seed=" + std::to_string(cfg.seed));

  const DatasetSplit& split = data(cfg.dataset);
  std::optional<Subset> train_buf, test_buf;
  const Subset* train = &split.train;
  const Subset* test = &split.test;
  if (cfg.train_limit > 0 && cfg.train_limit < split.train.count) {
    train_buf = subset_slice(split.train, 0, cfg.train_limit);
    train = &*train_buf;
  }
  if (cfg.test_limit > 0 && cfg.test_limit < split.test.count) {
    test_buf = subset_slice(split.test, 0, cfg.test_limit);
    test = &*test_buf;
  }

  ThinModel model = build_variant(cfg);
  prepare_stacks(model);
  const FrozenCache* frozen =
      cfg.train_limit > 0 ? nullptr : shared_cache(model, *train);

  MetricLog log(dir + "/metrics.jsonl");
  const auto t0 = clock_type::now();
  TrainOutcome out =
      train_model(model, *train, *test, &log, dir + "/checkpoint.bin", frozen);

  RunRecord rec;
  rec.digest = digest;
  rec.config = cfg.identity_json();
  rec.test_accuracy = out.test_accuracy;
  rec.best_val_accuracy = out.best_val_accuracy;
  rec.best_step = out.best_step;
  rec.steps = out.steps;
  rec.test_loss = out.test_eval.loss;
  rec.gate_entropy = out.test_eval.gate_entropy;
  rec.mean_abs_cos = out.test_eval.mean_abs_cos;
  rec.median_abs_cos = out.test_eval.median_abs_cos;
  rec.trainable_params = model.trainable_param_count();
  rec.frozen_params = model.frozen_param_count();
  rec.wall_seconds = seconds_since(t0);
  rec.diverged = out.diverged;

  if (!out.test_eval.abs_cos.empty()) {
    nlohmann::json hist;
    std::vector<int> counts(50, 0);
    for (double c : out.test_eval.abs_cos) {
      int b = static_cast<int>(c * 50.0);
      counts[std::clamp(b, 0, 49)]++;
    }
    hist["bins"] = 50;
    hist["lo"] = 0.0;
    hist["hi"] = 1.0;
    hist["counts"] = counts;
    hist["total"] = out.test_eval.abs_cos.size();
    hist["mean"] = out.test_eval.mean_abs_cos;
    hist["median"] = out.test_eval.median_abs_cos;
    write_json_atomic(dir + "/exports/cos_hist.json", hist);
  }

  write_json_atomic(dir + "/result.json", rec.to_json());
  note("done " + digest.substr(0, 12) +
       " test_accuracy=" + std::to_string(rec.test_accuracy) +
       " wall=" + std::to_string(rec.wall_seconds) + "s");
  return rec;
}

// --- Batteries -------------------------------------------------------------------

namespace {

// Shared aggregation: one table row per (label, configs-across-seeds).
nlohmann::json aggregate_rows(
    Runner& r, const std::vector<std::pair<std::string, std::vector<ExperimentConfig>>>& groups) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [label, cfgs] : groups) {
    nlohmann::json row;
    row["label"] = label;
    std::vector<double> acc, cosm, cosmed;
    nlohmann::json per_seed = nlohmann::json::array();
    bool failed = false;
    double wall = 0.0;
    for (const ExperimentConfig& cfg : cfgs) {
      try {
        RunRecord rec = r.run(cfg);
        if (rec.diverged) throw NumericError("run diverged");
        acc.push_back(rec.test_accuracy * 100.0);
        if (rec.mean_abs_cos >= 0.0) {
          cosm.push_back(rec.mean_abs_cos);
          cosmed.push_back(rec.median_abs_cos);
        }
        wall += rec.wall_seconds;
        per_seed.push_back({{"seed", cfg.seed},
                            {"digest", rec.digest},
                            {"test_accuracy_pct", rec.test_accuracy * 100.0},
                            {"median_abs_cos", rec.median_abs_cos}});
        row["trainable_params"] = rec.trainable_params;
        row["variant"] = rec.config.at("variant");
        row["gating_source"] = rec.config.at("gating_source");
        row["lambda"] = rec.config.at("lambda");
      } catch (const std::exception& e) {
        failed = true;
        per_seed.push_back({{"seed", cfg.seed}, {"failed", true}, {"error", e.what()}});
      }
    }
    row["failed"] = failed;
    row["mean_accuracy_pct"] = mean_of(acc);
    row["std_accuracy_pct"] = std_of(acc);
    if (!cosm.empty()) {
      row["mean_abs_cos"] = mean_of(cosm);
      row["mean_median_abs_cos"] = mean_of(cosmed);
    }
    row["wall_seconds"] = wall;
    row["runs"] = std::move(per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

double row_mean(const nlohmann::json& rows, const std::string& label) {
  for (const auto& row : rows)
    if (row.at("label") == label && !row.at("failed").get<bool>())
      return row.at("mean_accuracy_pct").get<double>();
  return std::nan("");
}

}  // namespace

nlohmann::json ladder(Runner& r, Dataset d, const std::vector<std::uint64_t>& seeds,
                      std::size_t epochs, std::size_t train_limit,
                      std::size_t test_limit) {
  r.evict_except(d);
  static const Variant kOrder[] = {Variant::baseline, Variant::simple_ensemble,
                                   Variant::tree_gated, Variant::exo_tree_gated,
                                   Variant::oracle, Variant::thin};
  std::vector<std::pair<std::string, std::vector<ExperimentConfig>>> groups;
  for (Variant v : kOrder) {
    std::vector<ExperimentConfig> cfgs;
    for (std::uint64_t s : seeds) {
      ExperimentConfig cfg;
      cfg.dataset = d;
      cfg.variant = v;
      cfg.seed = s;
      cfg.epochs = epochs;
      cfg.train_limit = train_limit;
      cfg.test_limit = test_limit;
      cfg.finalize();
      cfgs.push_back(cfg);
    }
    groups.emplace_back(to_string(v), std::move(cfgs));
  }

  nlohmann::json table;
  table["table"] = "ladder";
  table["dataset"] = to_string(d);
  table["epochs"] = epochs;
  table["seeds"] = seeds;
  table["rows"] = aggregate_rows(r, groups);

  const auto& rows = table["rows"];
  const double base = row_mean(rows, "baseline");
  const double simple = row_mean(rows, "simple_ensemble");
  const double tg = row_mean(rows, "tree_gated");
  const double etg = row_mean(rows, "exo_tree_gated");
  const double orc = row_mean(rows, "oracle");
  const double thin = row_mean(rows, "thin");
  nlohmann::json ord;
  ord["baseline_lt_tree_gated"] = base < tg;
  ord["tree_gated_lt_exo_tree_gated"] = tg < etg;
  ord["exo_tree_gated_le_thin"] = etg <= thin;
  ord["gap_thin_minus_baseline_pct"] = thin - base;
  ord["gap_exo_tree_gated_minus_tree_gated_pct"] = etg - tg;
  ord["gap_abs_oracle_minus_exo_tree_gated_pct"] = std::abs(orc - etg);
  ord["gap_simple_ensemble_minus_baseline_pct"] = simple - base;
  table["orderings"] = ord;

  write_json_atomic(r.paths().table_dir() + "/ladder_" + to_string(d) + ".json",
                    table);
  return table;
}

nlohmann::json gating_compare(Runner& r, const std::vector<std::uint64_t>& seeds,
                              std::size_t epochs, std::size_t train_limit,
                              std::size_t test_limit) {
  r.evict_except(Dataset::mnist_rs);
  struct RowDef {
    const char* label;
    Variant variant;
    std::optional<GatingSource> source;
  };
  static const RowDef kDefs[] = {
      {"digit", Variant::tree_gated, std::nullopt},
      {"scale", Variant::exo_tree_gated, GatingSource::exogenous_scale},
      {"rotation", Variant::exo_tree_gated, GatingSource::exogenous_rotation},
      {"rotation_scale", Variant::exo_tree_gated, GatingSource::exo_concat},
  };
  std::vector<std::pair<std::string, std::vector<ExperimentConfig>>> groups;
  for (const RowDef& def : kDefs) {
    std::vector<ExperimentConfig> cfgs;
    for (std::uint64_t s : seeds) {
      ExperimentConfig cfg;
      cfg.dataset = Dataset::mnist_rs;
      cfg.variant = def.variant;
      if (def.source) {
        cfg.gating_source = *def.source;
        cfg.gating_source_explicit = true;
      }
      cfg.seed = s;
      cfg.epochs = epochs;
      cfg.train_limit = train_limit;
      cfg.test_limit = test_limit;
      cfg.finalize();
      cfgs.push_back(cfg);
    }
    groups.emplace_back(def.label, std::move(cfgs));
  }

  nlohmann::json table;
  table["table"] = "gating_compare";
  table["dataset"] = to_string(Dataset::mnist_rs);
  table["epochs"] = epochs;
  table["seeds"] = seeds;
  table["rows"] = aggregate_rows(r, groups);

  const auto& rows = table["rows"];
  const double digit = row_mean(rows, "digit");
  const double scale = row_mean(rows, "scale");
  const double rotation = row_mean(rows, "rotation");
  const double both = row_mean(rows, "rotation_scale");
  nlohmann::json ord;
  ord["digit_lt_scale"] = digit < scale;
  ord["scale_lt_rotation"] = scale < rotation;
  ord["rotation_lt_rotation_scale"] = rotation < both;
  ord["gap_rotation_scale_minus_digit_pct"] = both - digit;
  table["orderings"] = ord;

  write_json_atomic(r.paths().table_dir() + "/gating_compare.json", table);
  return table;
}

nlohmann::json sweep_lambda(Runner& r, Dataset d, const std::vector<double>& lambdas,
                            const std::vector<std::uint64_t>& seeds,
                            std::size_t epochs, std::size_t train_limit,
                            std::size_t test_limit) {
  r.evict_except(d);
  std::vector<std::pair<std::string, std::vector<ExperimentConfig>>> groups;
  for (double lambda : lambdas) {
    std::vector<ExperimentConfig> cfgs;
    for (std::uint64_t s : seeds) {
      ExperimentConfig cfg;
      cfg.dataset = d;
      cfg.variant = lambda > 0.0 ? Variant::thin : Variant::exo_tree_gated;
      cfg.lambda = lambda;
      cfg.seed = s;
      cfg.epochs = epochs;
      cfg.train_limit = train_limit;
      cfg.test_limit = test_limit;
      cfg.finalize();
      cfgs.push_back(cfg);
    }
    char label[32];
    std::snprintf(label, sizeof label, "lambda=%g", lambda);
    groups.emplace_back(label, std::move(cfgs));
  }

  nlohmann::json table;
  table["table"] = "sweep_lambda";
  table["dataset"] = to_string(d);
  table["epochs"] = epochs;
  table["seeds"] = seeds;
  table["lambdas"] = lambdas;
  table["rows"] = aggregate_rows(r, groups);

  const auto& rows = table["rows"];
  const double at0 = row_mean(rows, "lambda=0");
  const double at5m = row_mean(rows, "lambda=0.005");
  nlohmann::json ord;
  ord["gap_lambda_0.005_minus_0_pct"] = at5m - at0;
  bool strong_below = false;
  for (const auto& row : rows) {
    const double l = row.contains("lambda") && row.at("lambda").is_number()
                         ? row.at("lambda").get<double>()
                         : 0.0;
    if (l >= 0.5 && !row.at("failed").get<bool>() &&
        row.at("mean_accuracy_pct").get<double>() < at0)
      strong_below = true;
  }
  ord["some_strong_lambda_below_lambda0"] = strong_below;
  table["orderings"] = ord;

  write_json_atomic(r.paths().table_dir() + "/sweep_" + to_string(d) + ".json",
                    table);
  return table;
}

std::string format_table(const nlohmann::json& table) {
  std::string out;
  out += table.at("table").get<std::string>() + "  dataset=" +
         table.at("dataset").get<std::string>() + "  epochs=" +
         std::to_string(table.at("epochs").get<std::size_t>()) + "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-18s %-14s %-12s %-10s %s\n", "row",
                "accuracy%", "|cos| mean", "params", "wall(s)");
  out += line;
  out += std::string(64, '-') + "\n";
  for (const auto& row : table.at("rows")) {
    if (row.at("failed").get<bool>()) {
      std::snprintf(line, sizeof line, "%-18s FAILED\n",
                    row.at("label").get<std::string>().c_str());
      out += line;
      continue;
    }
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.2f +/- %.2f",
                  row.at("mean_accuracy_pct").get<double>(),
                  row.at("std_accuracy_pct").get<double>());
    char cosbuf[16] = "-";
    if (row.contains("mean_abs_cos"))
      std::snprintf(cosbuf, sizeof cosbuf, "%.4f",
                    row.at("mean_abs_cos").get<double>());
    std::snprintf(line, sizeof line, "%-18s %-14s %-12s %-10zu %.0f\n",
                  row.at("label").get<std::string>().c_str(), acc, cosbuf,
                  row.value("trainable_params", std::size_t{0}),
                  row.at("wall_seconds").get<double>());
    out += line;
  }
  if (table.contains("orderings"))
    out += "orderings: " + table.at("orderings").dump() + "\n";
  return out;
}

// --- Introspection ------------------------------------------------------------

nlohmann::json introspect(Runner& r, const std::string& digest,
                          const std::string& split) {
  const std::string dir = r.paths().run_dir(digest);
  if (!fs::exists(dir + "/config.json"))
    throw ConfigError("no run directory for digest " + digest);
  ExperimentConfig cfg = ExperimentConfig::from_json(read_json(dir + "/config.json"));
  ThinModel model = build_variant(cfg);
  load_model_checkpoint(dir + "/checkpoint.bin", model);
  for (auto& s : model.exo) s->freeze();

  const DatasetSplit& ds = r.data(cfg.dataset);
  const bool use_train = split == "train";
  if (!use_train && split != "test")
    throw ConfigError("introspect split must be train or test, got " + split);
  const Subset& base = use_train ? ds.train : ds.test;
  const std::size_t limit = use_train ? cfg.train_limit : cfg.test_limit;
  std::optional<Subset> buf;
  const Subset* sub = &base;
  if (limit > 0 && limit < base.count) {
    buf = subset_slice(base, 0, limit);
    sub = &*buf;
  }

  const std::size_t N = sub->count;
  const std::size_t D = model.feat_dim();
  const std::size_t L = model.gate_width();
  const ExoFactor pf = primary_factor(cfg.dataset);
  const bool with_cos = model.has_stack(pf);

  std::vector<float> embeddings(N * D);
  std::vector<double> leaf_mass(L, 0.0);
  std::vector<std::size_t> leaf_argmax(L, 0);
  std::vector<double> abs_cos;
  const std::size_t nodes = model.tree ? model.tree->nodes() : 0;
  // Path probability of every internal node per sample, and the hard route.
  std::vector<std::vector<double>> node_prob(nodes);
  std::vector<std::vector<char>> node_hard(nodes);
  std::size_t correct = 0;

  {
    NoGradGuard ng;
    const std::size_t B = 256;
    for (std::size_t start = 0; start < N; start += B) {
      const std::size_t n = std::min(B, N - start);
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), start);
      Batch batch = gather_batch(*sub, idx);
      ForwardOut out = model.forward_logits(batch, false);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < D; ++k)
          embeddings[(start + i) * D + k] =
              static_cast<float>(out.h_endo.values()[i * D + k]);
      const std::size_t K = model.n_classes();
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = &out.z.values()[i * K];
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
          if (row[k] > row[best]) best = k;
        if (static_cast<int>(best) == batch.labels[i]) ++correct;
      }
      const std::size_t Lw = out.g.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        const double* g = &out.g.values()[i * Lw];
        std::size_t best = 0;
        for (std::size_t l = 0; l < Lw; ++l) {
          leaf_mass[l] += g[l];
          if (g[l] > g[best]) best = l;
        }
        leaf_argmax[best]++;
      }
      if (model.tree && out.h_gate.defined()) {
        Tensor d = model.tree->decisions(out.h_gate);
        for (std::size_t i = 0; i < n; ++i) {
          const double* drow = &d.values()[i * nodes];
          std::vector<double> p(nodes, 0.0);
          p[0] = 1.0;
          for (std::size_t m = 0; m < nodes; ++m) {
            const std::size_t lchild = 2 * m + 1, rchild = 2 * m + 2;
            if (lchild < nodes) p[lchild] = p[m] * drow[m];
            if (rchild < nodes) p[rchild] = p[m] * (1.0 - drow[m]);
          }
          std::size_t walk = 0;
          std::vector<char> hard(nodes, 0);
          while (walk < nodes) {
            hard[walk] = 1;
            walk = drow[walk] >= 0.5 ? 2 * walk + 1 : 2 * walk + 2;
          }
          for (std::size_t m = 0; m < nodes; ++m) {
            node_prob[m].push_back(p[m]);
            node_hard[m].push_back(hard[m]);
          }
        }
      }
      if (with_cos) {
        ExoStack& stack = model.stack(pf);
        Tensor u = stack.classify_frozen(stack.represent(batch.images));
        Tensor v = model.exo_logits(out.h_endo);
        const std::size_t Ke = u.dim(1);
        for (std::size_t i = 0; i < n; ++i) {
          double uv = 0, uu = 0, vv = 0;
          for (std::size_t k = 0; k < Ke; ++k) {
            const double a = u.values()[i * Ke + k], c = v.values()[i * Ke + k];
            uv += a * c;
            uu += a * a;
            vv += c * c;
          }
          const double den = std::sqrt(uu) * std::sqrt(vv);
          abs_cos.push_back(den < 1e-12 ? 0.0 : std::abs(uv / den));
        }
      }
    }
  }

  nlohmann::json written = nlohmann::json::array();
  const std::string ex = dir + "/exports";
  fs::create_directories(ex);

  if (!abs_cos.empty()) {
    std::vector<int> counts(50, 0);
    for (double c : abs_cos) counts[std::clamp((int)(c * 50.0), 0, 49)]++;
    std::vector<double> sorted = abs_cos;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t mid = sorted.size() / 2;
    nlohmann::json hist = {
        {"bins", 50},     {"lo", 0.0},
        {"hi", 1.0},      {"counts", counts},
        {"total", abs_cos.size()},
        {"split", split}, {"mean", mean_of(abs_cos)},
        {"median", sorted.size() % 2 ? sorted[mid]
                                     : 0.5 * (sorted[mid - 1] + sorted[mid])}};
    write_json_atomic(ex + "/cos_hist.json", hist);
    written.push_back("cos_hist.json");
  }

  if (model.tree) {
    const bool has_rot = !sub->rotation_deg.empty();
    const bool has_scale = !sub->scale_value.empty();
    nlohmann::json tnodes = nlohmann::json::array();
    for (std::size_t m = 0; m < nodes; ++m) {
      std::vector<std::size_t> order(N);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + std::min<std::size_t>(16, N),
                        order.end(), [&](std::size_t a, std::size_t b) {
                          return node_prob[m][a] > node_prob[m][b];
                        });
      order.resize(std::min<std::size_t>(16, N));
      nlohmann::json node;
      node["node"] = m;
      node["depth"] = (std::size_t)std::log2(m + 1);
      node["top_sample_indices"] = order;
      nlohmann::json probs = nlohmann::json::array();
      for (std::size_t i : order) probs.push_back(node_prob[m][i]);
      node["top_sample_probabilities"] = probs;
      double rot_sum = 0, scale_sum = 0;
      std::size_t routed = 0;
      for (std::size_t i = 0; i < N; ++i)
        if (node_hard[m][i]) {
          ++routed;
          if (has_rot) rot_sum += sub->rotation_deg[i];
          if (has_scale) scale_sum += sub->scale_value[i];
        }
      node["routed_count"] = routed;
      if (routed > 0 && has_rot) node["mean_rotation_deg"] = rot_sum / routed;
      if (routed > 0 && has_scale) node["mean_scale"] = scale_sum / routed;
      tnodes.push_back(std::move(node));
    }
    write_json_atomic(ex + "/tree_nodes.json",
                      {{"nodes", tnodes}, {"split", split}, {"count", N}});
    written.push_back("tree_nodes.json");
  }

  {
    double entropy = 0.0;
    nlohmann::json usage;
    std::vector<double> mean_mass(L);
    for (std::size_t l = 0; l < L; ++l) {
      mean_mass[l] = leaf_mass[l] / static_cast<double>(N);
      if (mean_mass[l] > 0.0) entropy -= mean_mass[l] * std::log(mean_mass[l]);
    }
    usage["mean_gate_mass"] = mean_mass;
    usage["argmax_counts"] = leaf_argmax;
    usage["entropy_nats"] = entropy;
    usage["max_entropy_nats"] = std::log(static_cast<double>(L));
    usage["split"] = split;
    write_json_atomic(ex + "/leaf_usage.json", usage);
    written.push_back("leaf_usage.json");
  }

  {
    std::ofstream emb(ex + "/embeddings.bin", std::ios::binary);
    emb.write(reinterpret_cast<const char*>(embeddings.data()),
              static_cast<std::streamsize>(embeddings.size() * sizeof(float)));
    std::ofstream lab(ex + "/embeddings_labels.bin", std::ios::binary);
    for (std::size_t i = 0; i < N; ++i) {
      const unsigned char y = static_cast<unsigned char>(sub->labels[i]);
      lab.write(reinterpret_cast<const char*>(&y), 1);
    }
    write_json_atomic(ex + "/embeddings_meta.json",
                      {{"count", N},
                       {"dim", D},
                       {"dtype", "float32"},
                       {"labels_file", "embeddings_labels.bin"},
                       {"labels_dtype", "uint8"},
                       {"split", split}});
    written.push_back("embeddings.bin");
    written.push_back("embeddings_labels.bin");
    written.push_back("embeddings_meta.json");
  }

  return {{"digest", digest},
          {"split", split},
          {"count", N},
          {"accuracy", static_cast<double>(correct) / static_cast<double>(N)},
          {"written", written},
          {"exports_dir", ex}};
}

// --- Gradcheck battery -----------------------------------------------------------

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

GradcheckEntry check(const std::string& name,
                     const std::function<Tensor(const Tensor&)>& f,
                     const Tensor& x, double tol = 1e-6) {
  GradCheckReport rep = gradcheck(f, x, 1e-5, tol);
  GradcheckEntry e;
  e.op = name;
  e.max_rel_err = rep.max_rel_err;
  e.checked = rep.checked;
  e.skipped = rep.skipped;
  e.pass = rep.pass;
  return e;
}

// A deliberately corrupted op: forward is sigmoid, backward flips the sign.
// The battery uses it to prove the checker can catch a wrong gradient.
Tensor broken_sigmoid(const Tensor& x) {
  Tensor y = sigmoid(x);  // correct forward AND correct recorded backward
  Tensor flipped = Tensor::zeros(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i)
    flipped.values()[i] = y.values()[i];
  if (should_record({&x})) {
    flipped.ptr()->tracked = true;
    auto xd = x.ptr(), fd = flipped.ptr();
    Tape::active()->record([xd, fd] {
      if (fd->grad.empty()) return;
      if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
      for (std::size_t i = 0; i < fd->grad.size(); ++i) {
        const double s = fd->value[i] * (1.0 - fd->value[i]);
        xd->grad[i] -= fd->grad[i] * s;  // sign flipped on purpose
      }
    });
  }
  return flipped;
}

}  // namespace

std::vector<GradcheckEntry> gradcheck_battery(bool negative_control) {
  std::vector<GradcheckEntry> out;
  RngStream rng(41, "gradcheck");

  {
    Tensor x = random_tensor({4, 6}, rng);
    Tensor m = random_tensor({6, 5}, rng);
    out.push_back(check("matmul", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, matmul(t, m));
    }, x));
  }
  {
    Tensor x = random_tensor({3, 7}, rng);
    Tensor o = random_tensor({3, 7}, rng);
    out.push_back(check("add", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, add(t, o));
    }, x));
    out.push_back(check("mul", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(t, o));
    }, x));
    Tensor denom = random_tensor({3, 7}, rng, 0.5, 2.0);
    out.push_back(check("div", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, div(t, denom));
    }, x));
    out.push_back(check("sigmoid", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, sigmoid(t));
    }, x));
    out.push_back(check("exp", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, exp(t));
    }, x));
    out.push_back(check("relu", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, relu(t));
    }, x));
    out.push_back(check("abs", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, abs(t));
    }, x));
    out.push_back(check("reduce_sum", [&](const Tensor& t) {
      return reduce(ReduceOp::sum, mul(t, t));
    }, x));
    out.push_back(check("reshape", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(reshape(t, {7, 3}), reshape(t, {7, 3})));
    }, x));
  }
  {
    Tensor x = random_tensor({3, 4}, rng, 0.2, 3.0);
    out.push_back(check("log", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, log(t));
    }, x));
  }
  {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    out.push_back(check("concat_cols", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(concat_cols(t, b), concat_cols(t, b)));
    }, a));
  }
  {
    RngStream init(7, "init");
    Dense dense(6, 4, init);
    Tensor x = random_tensor({5, 6}, rng);
    out.push_back(check("dense", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(dense.forward(t), dense.forward(t)));
    }, x));
    out.push_back(check("dense_weights", [&](const Tensor& t) {
      Dense d2 = dense;
      d2.w = t;
      return reduce(ReduceOp::mean, d2.forward(x));
    }, dense.w));
  }
  {
    RngStream init(8, "init");
    Conv2d conv(2, 3, 3, init);
    Tensor x = random_tensor({2, 2, 7, 7}, rng);
    out.push_back(check("conv2d", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(conv.forward(t), conv.forward(t)));
    }, x));
    out.push_back(check("conv2d_weights", [&](const Tensor& t) {
      Conv2d c2 = conv;
      c2.w = t;
      return reduce(ReduceOp::mean, c2.forward(x));
    }, conv.w));
  }
  {
    Tensor x = random_tensor({2, 2, 6, 6}, rng);
    out.push_back(check("maxpool2", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, maxpool2(t));
    }, x));
  }
  {
    RngStream init(9, "init");
    BatchNorm bn(3);
    Tensor x = random_tensor({4, 3, 5, 5}, rng);
    out.push_back(check("batchnorm", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(bn.forward(t, true), bn.forward(t, true)));
    }, x, 1e-5));
  }
  {
    RngStream init(10, "init");
    GateTree tree(6, 3, init);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor weights = random_tensor({4, 8}, rng);
    out.push_back(check("tree_gate", [&](const Tensor& t) {
      return reduce(ReduceOp::mean, mul(tree.forward(t), weights));
    }, x));
  }
  {
    RngStream init(11, "init");
    std::vector<Tensor> zs;
    for (int l = 0; l < 4; ++l) zs.push_back(random_tensor({3, 5}, rng));
    GateTree tree(5, 2, init);
    Tensor h = random_tensor({3, 5}, rng);
    out.push_back(check("mix_logits", [&](const Tensor& t) {
      std::vector<Tensor> z2 = zs;
      z2[1] = t;
      return reduce(ReduceOp::mean, mul(mix_logits(z2, tree.forward(h)),
                                        mix_logits(z2, tree.forward(h))));
    }, zs[1]));
  }
  {
    Tensor z = random_tensor({4, 6}, rng, -2.0, 2.0);
    std::vector<int> labels = {0, 3, 5, 2};
    Tensor y = one_hot(labels, 6);
    out.push_back(check("cross_entropy", [&](const Tensor& t) {
      return cross_entropy(t, y);
    }, z));
  }
  {
    Tensor u = random_tensor({4, 6}, rng);
    Tensor v = random_tensor({4, 6}, rng);
    out.push_back(check("dispel_loss", [&](const Tensor& t) {
      return dispel_loss(u, t);
    }, v));
  }
  {
    // End-to-end THIN graph: finite differences on sampled parameters of the
    // full objective (supervised + dispelling) on a small random batch.
    ExperimentConfig cfg;
    cfg.dataset = Dataset::mnist_r;
    cfg.variant = Variant::thin;
    cfg.train_limit = 0;
    cfg.finalize();
    ThinModel model = build_variant(cfg);
    for (auto& s : model.exo) s->freeze();
    Batch batch;
    batch.images = random_tensor({4, 1, 28, 28}, rng, 0.0, 1.0);
    batch.images.ptr()->requires_grad = false;
    batch.labels = {1, 7, 3, 9};
    batch.rotation_class = {0, 5, 11, 17};

    auto loss_value = [&]() {
      NoGradGuard ng;
      return compute_losses(model, batch, false).total.item();
    };
    NamedParams params;
    model.collect_trainable(params);
    Tape tape;
    LossOut out_loss = compute_losses(model, batch, false);
    tape.backward(out_loss.total);

    GradcheckEntry e;
    e.op = "end_to_end_thin";
    e.pass = true;
    RngStream pick(5, "pick");
    const double h = 1e-5;
    for (int probe = 0; probe < 8; ++probe) {
      auto& [name, p] = params[pick.below(params.size())];
      const std::size_t i = pick.below(p.size());
      const double keep = p.values()[i];
      p.values()[i] = keep + h;
      const double up = loss_value();
      p.values()[i] = keep - h;
      const double dn = loss_value();
      p.values()[i] = keep;
      const double fd = (up - dn) / (2 * h);
      const double an = p.has_grad() ? p.grad()[i] : 0.0;
      const double rel = std::abs(fd - an) / std::max({1.0e-8, std::abs(fd), std::abs(an)});
      e.max_rel_err = std::max(e.max_rel_err, rel);
      ++e.checked;
      if (rel > 2e-4) e.pass = false;
    }
    out.push_back(e);
  }

  if (negative_control) {
    Tensor x = random_tensor({3, 5}, rng);
    GradCheckReport rep = gradcheck(
        [&](const Tensor& t) { return reduce(ReduceOp::mean, broken_sigmoid(t)); },
        x, 1e-5, 1e-6);
    GradcheckEntry e;
    e.op = "negative_control";
    e.max_rel_err = rep.max_rel_err;
    e.checked = rep.checked;
    e.skipped = rep.skipped;
    e.pass = !rep.pass;  // the corrupted backward MUST be caught
    out.push_back(e);
  }
  return out;
}

bool gradcheck_all_passed(const std::vector<GradcheckEntry>& entries) {
  for (const auto& e : entries)
    if (!e.pass) return false;
  return !entries.empty();
}

}  // namespace thin
