#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "oracles.hpp"
#include "thin/trainer.hpp"

using namespace thin;

namespace {

std::string data_dir() {
  const char* e = std::getenv("THIN_DATA_DIR");
  if (e) return e;
#ifdef THIN_TEST_DATA_DIR
  return THIN_TEST_DATA_DIR;
#else
  return "data/mnist";
#endif
}

// One shared MNIST-R build for the whole suite (a few seconds once).
const DatasetSplit& mnist_r() {
  static DatasetSplit split = build_dataset(Dataset::mnist_r, 1, data_dir());
  return split;
}

Tensor param(std::initializer_list<double> vals) {
  Tensor t = Tensor::zeros({vals.size()}, true);
  std::copy(vals.begin(), vals.end(), t.values().begin());
  return t;
}

void set_grad(Tensor& t, std::initializer_list<double> g) {
  t.ptr()->grad.assign(g.begin(), g.end());
}

ExperimentConfig tiny_config(Variant v, std::size_t epochs) {
  ExperimentConfig cfg;
  cfg.dataset = Dataset::mnist_r;
  cfg.variant = v;
  cfg.seed = 1;
  cfg.epochs = epochs;
  cfg.val_size = 128;
  cfg.finalize();
  return cfg;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("adam: first step matches the closed form") {
  Tensor p = param({5.0});
  Adam adam({{"p", p}});
  set_grad(p, {1.0});
  adam.step();
  // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  const double expect = 5.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
  CHECK(p.values()[0] == doctest::Approx(expect).epsilon(1e-14));
  CHECK(adam.t() == 1);
}

TEST_CASE("adam: empty and zero gradients leave the parameter unchanged") {
  Tensor a = param({2.5});
  Tensor b = param({-1.25});
  Adam adam({{"a", a}, {"b", b}});
  set_grad(b, {0.0});
  for (int i = 0; i < 5; ++i) adam.step();  // a's grad buffer stays empty
  CHECK(a.values()[0] == 2.5);
  CHECK(b.values()[0] == -1.25);
}

TEST_CASE("adam: trajectory matches an independent reference") {
  Tensor p = param({0.7, -0.3});
  AdamConfig cfg;
  cfg.lr = 0.01;
  Adam adam({{"p", p}}, cfg);

  // Reference implementation maintained separately in the test.
  double ref[2] = {0.7, -0.3};
  double m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 9; ++t) {
    const double g[2] = {std::sin(t * 1.0), std::cos(t * 0.5) - 0.2};
    set_grad(p, {g[0], g[1]});
    adam.step();
    for (int k = 0; k < 2; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * g[k];
      v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
      const double mh = m[k] / (1.0 - std::pow(0.9, t));
      const double vh = v[k] / (1.0 - std::pow(0.999, t));
      ref[k] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
  CHECK(p.values()[0] == doctest::Approx(ref[0]).epsilon(1e-14));
  CHECK(p.values()[1] == doctest::Approx(ref[1]).epsilon(1e-14));
}

TEST_CASE("adam: minimizes a quadratic bowl") {
  Tensor p = param({0.0});
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam adam({{"p", p}}, cfg);
  for (int t = 0; t < 500; ++t) {
    set_grad(p, {2.0 * (p.values()[0] - 3.0)});
    adam.step();
  }
  CHECK(std::abs(p.values()[0] - 3.0) < 1e-2);
}

TEST_CASE("adam: step size is insensitive to loss scale") {
  Tensor a = param({1.0});
  Tensor b = param({1.0});
  Adam oa({{"a", a}});
  Adam ob({{"b", b}});
  for (int t = 0; t < 50; ++t) {
    const double g = std::cos(0.1 * t) + 0.1;
    set_grad(a, {g});
    set_grad(b, {1000.0 * g});
    oa.step();
    ob.step();
  }
  const double da = a.values()[0] - 1.0;
  const double db = b.values()[0] - 1.0;
  CHECK(std::abs(da - db) < 0.01 * std::abs(da));
}

TEST_CASE("adam: non-finite gradient aborts with the parameter name") {
  Tensor w = param({1.0, 2.0});
  Adam adam({{"head.w1", w}});
  set_grad(w, {0.5, std::nan("")});
  try {
    adam.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("head.w1") != std::string::npos);
  }
}

TEST_CASE("params_hash: sensitive to content, stable on copies") {
  Tensor a = param({1.0, 2.0});
  Tensor b = param({3.0});
  NamedParams ps = {{"a", a}, {"b", b}};
  const std::uint64_t h0 = params_hash(ps);
  CHECK(params_hash(ps) == h0);
  b.values()[0] = std::nextafter(3.0, 4.0);
  CHECK(params_hash(ps) != h0);
}

TEST_CASE("metric log: appends one json object per line") {
  const std::string path = "metric_log_test.jsonl";
  std::remove(path.c_str());
  {
    MetricLog log(path);
    log.record({{"step", 1}, {"split", "train"}, {"L", 0.5}});
    log.record({{"step", 2}, {"split", "val"}, {"accuracy", 0.25}});
    CHECK(log.records().size() == 2);
  }
  std::ifstream in(path);
  std::string line;
  std::vector<nlohmann::json> parsed;
  while (std::getline(in, line)) parsed.push_back(nlohmann::json::parse(line));
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0]["step"] == 1);
  CHECK(parsed[1]["split"] == "val");
  CHECK(parsed[1]["accuracy"] == 0.25);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: bit-exact round trip with manifest") {
  Tensor a = param({0.1, -0.2, 0.3});
  Tensor b = Tensor::zeros({2, 2}, true);
  for (std::size_t i = 0; i < 4; ++i) b.values()[i] = std::sqrt(i + 2.0);
  std::vector<double> buf = {7.5, -2.25};
  NamedParams ps = {{"a", a}, {"b", b}};
  NamedBuffers bufs = {{"bn.mean", &buf}};

  const std::vector<double> a0 = a.values(), b0 = b.values(), buf0 = buf;
  const std::string path = "ckpt_test.bin";
  save_checkpoint(path, {{"note", "alpha"}}, ps, bufs);

  for (auto& x : a.values()) x += 1.0;
  for (auto& x : b.values()) x *= -1.0;
  buf[0] = 0.0;

  nlohmann::json manifest = load_checkpoint(path, ps, bufs);
  CHECK(std::memcmp(a.values().data(), a0.data(), a0.size() * 8) == 0);
  CHECK(std::memcmp(b.values().data(), b0.data(), b0.size() * 8) == 0);
  CHECK(buf == buf0);
  CHECK(manifest["note"] == "alpha");
  CHECK(manifest["tensors"].size() == 2);
  CHECK(manifest["buffers"].size() == 1);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: corruption and mismatches raise io errors") {
  Tensor a = param({1.0});
  NamedParams ps = {{"a", a}};
  NamedBuffers none;
  const std::string path = "ckpt_bad.bin";
  save_checkpoint(path, {}, ps, none);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("JUNKJUNK", 8);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path, ps, none), IoError);
  }
  SUBCASE("truncated payload") {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 4));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path, ps, none), IoError);
  }
  SUBCASE("missing tensor name") {
    NamedParams other = {{"zzz", param({1.0})}};
    CHECK_THROWS_AS(load_checkpoint(path, other, none), IoError);
  }
  SUBCASE("shape mismatch") {
    NamedParams other = {{"a", Tensor::zeros({3}, true)}};
    CHECK_THROWS_AS(load_checkpoint(path, other, none), IoError);
  }
  std::remove(path.c_str());
}

TEST_CASE("model checkpoint: transfers full state across instances") {
  ExperimentConfig cfg = tiny_config(Variant::baseline, 1);
  ThinModel a = build_variant(cfg);

  NamedParams pa;
  a.collect_trainable(pa);
  for (auto& x : pa[0].second.values()) x += 0.5;  // make a distinct state
  NamedBuffers ba;
  a.collect_buffers(ba);
  (*ba[0].second)[0] += 0.25;

  const std::string path = "ckpt_model.bin";
  save_model_checkpoint(path, a, {{"step", 42}});

  ThinModel b = build_variant(cfg);
  NamedParams pb;
  b.collect_trainable(pb);
  CHECK(params_hash(pa) != params_hash(pb));  // perturbation is visible

  nlohmann::json manifest = load_model_checkpoint(path, b);
  CHECK(manifest["step"] == 42);
  pb.clear();
  b.collect_trainable(pb);
  CHECK(params_hash(pa) == params_hash(pb));
  NamedBuffers bb;
  b.collect_buffers(bb);
  CHECK(*ba[0].second == *bb[0].second);
  std::remove(path.c_str());
}

TEST_CASE("subset_slice: copies the addressed rows and fields") {
  const Subset& full = mnist_r().train;
  Subset s = subset_slice(full, 100, 50);
  CHECK(s.count == 50);
  CHECK(s.hw == full.hw);
  const std::size_t px = full.hw * full.hw;
  CHECK(std::memcmp(s.pixels.data(), full.pixels.data() + 100 * px,
                    50 * px * sizeof(float)) == 0);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(s.labels[i] == full.labels[100 + i]);
    CHECK(s.rotation_class[i] == full.rotation_class[100 + i]);
    CHECK(s.rotation_deg[i] == full.rotation_deg[100 + i]);
    CHECK(s.scale_value[i] == full.scale_value[100 + i]);
  }
  CHECK(s.scale_class.empty());
}

TEST_CASE("frozen cache: attach reproduces the fresh forward closely") {
  ExperimentConfig cfg = tiny_config(Variant::thin, 1);
  ThinModel model = build_variant(cfg);
  for (auto& s : model.exo) s->freeze();

  Subset data = subset_slice(mnist_r().train, 0, 160);
  FrozenCache cache = build_frozen_cache(model, data, 64);
  REQUIRE(!cache.empty());
  CHECK(cache.count == 160);
  CHECK(cache.dim[0] == model.stack(ExoFactor::rotation).net.out_dim());

  std::vector<std::size_t> idx = {3, 77, 150};
  Batch fresh = gather_batch(data, idx);
  Batch cached = gather_batch(data, idx);
  cache.attach(model, cached, idx);
  REQUIRE(cached.h_exo_cached.size() == model.exo.size());
  REQUIRE(cached.z_exo_exo_cached.defined());

  NoGradGuard ng;
  ForwardOut a = model.forward_logits(fresh, false);
  ForwardOut b = model.forward_logits(cached, false);
  // The cache stores f32 features, so agreement is close but not bit-exact.
  for (std::size_t i = 0; i < a.z.size(); ++i)
    CHECK(a.z.values()[i] == doctest::Approx(b.z.values()[i]).epsilon(1e-4));

  ExoStack& stack = model.stack(ExoFactor::rotation);
  Tensor u = stack.classify_frozen(stack.represent(fresh.images));
  for (std::size_t i = 0; i < u.size(); ++i)
    CHECK(u.values()[i] ==
          doctest::Approx(cached.z_exo_exo_cached.values()[i]).epsilon(1e-4));
}

TEST_CASE("train: refuses unfrozen exogenous stacks") {
  ExperimentConfig cfg = tiny_config(Variant::thin, 1);
  ThinModel model = build_variant(cfg);  // stacks not yet frozen
  Subset train = subset_slice(mnist_r().train, 0, 300);
  Subset test = subset_slice(mnist_r().test, 0, 64);
  try {
    train_model(model, train, test);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("still trainable") != std::string::npos);
  }
}

TEST_CASE("train: deterministic and checkpointed") {
  ExperimentConfig cfg = tiny_config(Variant::baseline, 2);
  Subset train = subset_slice(mnist_r().train, 0, 800);
  Subset test = subset_slice(mnist_r().test, 0, 256);
  const std::string path = "ckpt_train.bin";

  ThinModel m1 = build_variant(cfg);
  MetricLog log1;
  TrainOutcome o1 = train_model(m1, train, test, &log1, path);

  ThinModel m2 = build_variant(cfg);
  MetricLog log2;
  TrainOutcome o2 = train_model(m2, train, test, &log2);

  CHECK(o1.test_accuracy == o2.test_accuracy);
  CHECK(o1.best_val_accuracy == o2.best_val_accuracy);
  CHECK(o1.best_step == o2.best_step);
  REQUIRE(log1.records().size() == log2.records().size());
  for (std::size_t i = 0; i < log1.records().size(); ++i)
    CHECK(log1.records()[i].dump() == log2.records()[i].dump());

  NamedParams p1, p2;
  m1.collect_trainable(p1);
  m2.collect_trainable(p2);
  CHECK(params_hash(p1) == params_hash(p2));

  // Log structure: one val record per epoch, one test record at the end.
  std::size_t vals = 0, tests = 0;
  for (const auto& r : log1.records()) {
    if (r["split"] == "val") ++vals;
    if (r["split"] == "test") ++tests;
  }
  CHECK(vals == cfg.epochs);
  CHECK(tests == 1);
  CHECK(o1.best_step <= o1.steps);
  CHECK(o1.steps == cfg.epochs * ((800 - cfg.val_size) / cfg.batch_size));

  // The restored-best model is what the checkpoint holds.
  ThinModel m3 = build_variant(cfg);
  load_model_checkpoint(path, m3);
  EvalResult r3 = evaluate(m3, test);
  CHECK(r3.accuracy == o1.test_accuracy);
  NamedParams p3;
  m3.collect_trainable(p3);
  CHECK(params_hash(p3) == params_hash(p1));

  // The selection really is the best validation epoch.
  Subset val = subset_slice(train, 800 - cfg.val_size, cfg.val_size);
  EvalResult vr = evaluate(m1, val);
  CHECK(vr.accuracy == doctest::Approx(o1.best_val_accuracy).epsilon(1e-12));
  std::remove(path.c_str());
}

TEST_CASE("train: short run learns well above chance" * doctest::timeout(300)) {
  ExperimentConfig cfg = tiny_config(Variant::baseline, 3);
  Subset train = subset_slice(mnist_r().train, 0, 2000);
  Subset test = subset_slice(mnist_r().test, 0, 500);
  ThinModel model = build_variant(cfg);
  MetricLog log;
  TrainOutcome out = train_model(model, train, test, &log);
  CHECK(!out.diverged);
  CHECK(out.test_accuracy > 0.5);
  EvalResult onTrain = evaluate(model, subset_slice(train, 0, 500));
  CHECK(onTrain.accuracy > 0.55);
}

TEST_CASE("evaluate: confusion matrix is consistent, uniform gate at ln L") {
  ExperimentConfig cfg = tiny_config(Variant::simple_ensemble, 1);
  ThinModel model = build_variant(cfg);
  Subset data = subset_slice(mnist_r().test, 0, 128);
  EvalResult r = evaluate(model, data);

  CHECK(r.gate_entropy == doctest::Approx(std::log(8.0)).epsilon(1e-9));

  int total = 0, diag = 0;
  std::vector<int> row_count(10, 0);
  for (int t = 0; t < 10; ++t)
    for (int p = 0; p < 10; ++p) {
      total += r.confusion[t][p];
      row_count[t] += r.confusion[t][p];
      if (t == p) diag += r.confusion[t][p];
    }
  CHECK(total == 128);
  CHECK(r.accuracy == doctest::Approx(diag / 128.0).epsilon(1e-12));
  for (int t = 0; t < 10; ++t)
    if (row_count[t] > 0)
      CHECK(r.per_class[t] ==
            doctest::Approx(double(r.confusion[t][t]) / row_count[t])
                .epsilon(1e-12));
  CHECK(r.mean_abs_cos == -1.0);  // no dispelling stack on this variant
}

TEST_CASE("pretrain: rotation stack learns the factor and freezes" *
          doctest::timeout(300)) {
  RngStream rng(7, "exo_init");
  ExoStack stack(ExoFactor::rotation, 28, 18, rng);
  Subset train = subset_slice(mnist_r().train, 0, 3000);
  Subset test = subset_slice(mnist_r().test, 0, 500);
  MetricLog log;
  PretrainResult r = pretrain_exogenous(stack, train, test, 1, 7, &log);

  CHECK(r.steps == 3000 / 32);
  CHECK(r.bin_accuracy > 0.15);  // chance is 1/18
  CHECK(r.value_mae < 40.0);     // predicting 0 degrees would give ~45

  NamedParams ps;
  stack.collect_params("exo", ps);
  for (auto& [name, p] : ps) CHECK(!p.requires_grad());
  CHECK(!log.records().empty());
  CHECK(log.records().back()["split"] == "pretrain_eval/rotation");
}

}  // TEST_SUITE
