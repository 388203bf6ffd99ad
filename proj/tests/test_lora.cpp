#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "cola/harness.hpp"
#include "cola/lora.hpp"
#include "cola/ops.hpp"
#include "cola/serialize.hpp"
#include "test_fixtures.hpp"

using namespace cola;
using cola::testing::small_backbone;
using cola::testing::small_config;

namespace {

bool flats_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

AdapterWeights random_adapter(const BackboneModel& model, const AdapterConfig& cfg,
                              uint64_t seed) {
  AdapterConfig c = cfg;
  c.seed = seed;
  AdapterWeights w = init_adapter(c, model);
  Rng rng(seed + 1);
  for (auto& e : w.entries) {
    for (double& v : *e.a.data) v = rng.gaussian(0.0, 0.5);
    for (double& v : *e.b.data) v = rng.gaussian(0.0, 0.5);
  }
  return w;
}

}  // namespace

TEST_CASE("fresh init is deterministic per seed and differs across seeds") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  cfg.seed = 7;
  AdapterWeights a = init_adapter(cfg, model);
  AdapterWeights b = init_adapter(cfg, model);
  CHECK(flats_equal(vectorize(a, "x").flat, vectorize(b, "x").flat));
  cfg.seed = 8;
  AdapterWeights c = init_adapter(cfg, model);
  CHECK_FALSE(flats_equal(vectorize(a, "x").flat, vectorize(c, "x").flat));
  // B starts at zero in every case.
  for (const auto& e : a.entries) {
    for (double v : *e.b.data) CHECK(v == 0.0);
  }
}

TEST_CASE("warm start restores a snapshot bit-exactly") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  AdapterWeights w = random_adapter(model, cfg, 21);
  AdapterSnapshot snap = vectorize(w, "warm");
  AdapterWeights restored = init_adapter(cfg, model, &snap);
  CHECK(flats_equal(vectorize(restored, "warm").flat, snap.flat));
}

TEST_CASE("rank-2 adapter over two d=k=32 points flattens to 256 values") {
  BackboneConfig bcfg;  // default: one block, d = 32, points blk0.q / blk0.v
  BackboneModel model = BackboneModel::init(bcfg, 1);
  AdapterConfig cfg;
  cfg.rank = 2;
  cfg.seed = 1;
  const SnapshotLayout layout = layout_for(cfg, model);
  CHECK(layout.total == 2ull * 2 * (32 + 32));
  AdapterWeights w = init_adapter(cfg, model);
  AdapterSnapshot snap = vectorize(w, "t");
  CHECK(snap.flat.size() == 256);
  CHECK(snap.layout.entries.size() == 4);  // A and B per point
}

TEST_CASE("vectorize/devectorize is a bijection on random adapters") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    AdapterWeights w = random_adapter(model, cfg, 1000 + seed);
    AdapterSnapshot snap = vectorize(w, "t" + std::to_string(seed));
    AdapterWeights back = devectorize(snap, cfg, model);
    AdapterSnapshot again = vectorize(back, snap.task_id);
    CHECK(flats_equal(snap.flat, again.flat));
    CHECK(snap.layout == again.layout);
    // Per-matrix Frobenius norms survive the round trip.
    for (size_t e = 0; e < w.entries.size(); ++e) {
      auto frob = [](const Tensor& t) {
        double s = 0.0;
        for (double x : *t.data) s += x * x;
        return std::sqrt(s);
      };
      CHECK(frob(w.entries[e].a) == frob(back.entries[e].a));
      CHECK(frob(w.entries[e].b) == frob(back.entries[e].b));
    }
  }
}

TEST_CASE("all-zero adapter flattens to all zeros") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  cfg.seed = 3;
  AdapterWeights w = init_adapter(cfg, model);
  for (auto& e : w.entries) std::fill(e.a.data->begin(), e.a.data->end(), 0.0);
  AdapterSnapshot snap = vectorize(w, "zero");
  for (double v : snap.flat) CHECK(v == 0.0);
}

TEST_CASE("devectorize rejects wrong lengths and layouts") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  AdapterWeights w = random_adapter(model, cfg, 4);
  AdapterSnapshot snap = vectorize(w, "bad");
  AdapterSnapshot truncated = snap;
  truncated.flat.pop_back();
  CHECK_THROWS_WITH_AS(devectorize(truncated, cfg, model),
                       doctest::Contains("layout"), std::runtime_error);
  AdapterSnapshot renamed = snap;
  renamed.layout.entries[0].point = "blk9.q";
  CHECK_THROWS_WITH_AS(devectorize(renamed, cfg, model),
                       doctest::Contains("layout"), std::runtime_error);
}

TEST_CASE("rank cap r <= min(d,k)/4 is enforced") {
  const BackboneModel& model = small_backbone();  // d = 16 -> max rank 4
  AdapterConfig cfg = small_config().adapter;
  cfg.rank = 5;
  CHECK_THROWS_WITH_AS(init_adapter(cfg, model), doctest::Contains("rank"),
                       std::runtime_error);
}

TEST_CASE("train_task solves a separable task at least as well as the probe oracle") {
  const BackboneModel& model = small_backbone();
  StreamConfig cfg = small_config();
  std::vector<TaskDataset> stream = generate_stream(cfg);
  TaskDataset& task = stream[1];

  // Construction audit: a logistic probe on frozen pooled features separates
  // the classes; only then is >= 0.95 a fair bar for the adapter.
  const double probe = probe_accuracy(model, task.train(), task.valid(), 17);
  CHECK(probe >= 0.95);

  AdapterConfig acfg = cfg.adapter;
  acfg.seed = 11;
  AdapterWeights w = init_adapter(acfg, model);
  TaskMetrics metrics = train_task(model, w, task, acfg);
  CHECK(metrics.final_val_accuracy >= 0.95);
}

TEST_CASE("zero training steps leave the adapter untouched") {
  const BackboneModel& model = small_backbone();
  StreamConfig cfg = small_config();
  std::vector<TaskDataset> stream = generate_stream(cfg);
  AdapterConfig acfg = cfg.adapter;
  acfg.steps = 0;
  acfg.seed = 5;
  AdapterWeights w = init_adapter(acfg, model);
  const AdapterSnapshot before = vectorize(w, "t");
  TaskMetrics metrics = train_task(model, w, stream[0], acfg);
  CHECK(flats_equal(vectorize(w, "t").flat, before.flat));
  CHECK(metrics.final_val_accuracy == metrics.initial_val_accuracy);
}

TEST_CASE("train_task contract checks") {
  const BackboneModel& model = small_backbone();
  StreamConfig cfg = small_config();
  std::vector<TaskDataset> stream = generate_stream(cfg);
  AdapterConfig acfg = cfg.adapter;
  acfg.steps = 40;
  acfg.seed = 6;

  SUBCASE("backbone is bit-frozen across training") {
    const uint64_t before = model.weight_checksum();
    AdapterWeights w = init_adapter(acfg, model);
    train_task(model, w, stream[2], acfg);
    CHECK(model.weight_checksum() == before);
  }
  SUBCASE("empty dataset errors") {
    AdapterWeights w = init_adapter(acfg, model);
    TaskDataset empty("empty", {}, {}, {});
    CHECK_THROWS(train_task(model, w, empty, acfg));
  }
  SUBCASE("unfrozen backbone is rejected") {
    BackboneModel thawed = model.clone();
    thawed.frozen = false;
    AdapterWeights w = init_adapter(acfg, model);
    CHECK_THROWS_WITH_AS(train_task(thawed, w, stream[2], acfg),
                         doctest::Contains("frozen"), std::runtime_error);
  }
}

TEST_CASE("snapshot files round-trip bit-exactly") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  AdapterWeights w = random_adapter(model, cfg, 31);
  AdapterSnapshot snap = vectorize(w, "disk-task");

  const std::vector<uint8_t> bytes = snapshot_bytes(snap);
  AdapterSnapshot loaded = snapshot_from_bytes(bytes);
  CHECK(loaded.task_id == snap.task_id);
  CHECK(loaded.layout == snap.layout);
  // Payload is f32 on disk: values round to f32, bytes round-trip exactly.
  for (size_t i = 0; i < snap.flat.size(); ++i) {
    CHECK(loaded.flat[i] == static_cast<double>(static_cast<float>(snap.flat[i])));
  }
  CHECK(snapshot_bytes(loaded) == bytes);

  const std::string path = "/tmp/cola_test_snapshot.bin";
  save_snapshot(snap, path);
  AdapterSnapshot from_disk = load_snapshot(path);
  CHECK(snapshot_bytes(from_disk) == bytes);
  std::remove(path.c_str());
}

TEST_CASE("snapshot magic is validated") {
  const BackboneModel& model = small_backbone();
  AdapterConfig cfg = small_config().adapter;
  AdapterSnapshot snap = vectorize(random_adapter(model, cfg, 41), "m");
  std::vector<uint8_t> bytes = snapshot_bytes(snap);
  bytes[0] = 'X';
  CHECK_THROWS_WITH_AS(snapshot_from_bytes(bytes), doctest::Contains("magic"),
                       std::runtime_error);
}
