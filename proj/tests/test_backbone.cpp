#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <thread>

#include "cola/backbone.hpp"
#include "cola/harness.hpp"
#include "cola/lora.hpp"
#include "cola/ops.hpp"
#include "cola/serialize.hpp"
#include "cola/store.hpp"
#include "test_fixtures.hpp"

using namespace cola;
using cola::testing::small_backbone;
using cola::testing::small_config;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  for (size_t i = 0; i < a.numel(); ++i) {
    if ((*a.data)[i] != (*b.data)[i]) return false;
  }
  return true;
}

std::vector<int> sample_tokens(const BackboneModel& m, uint64_t seed, int len) {
  Rng rng(seed);
  std::vector<int> t;
  for (int i = 0; i < len; ++i) t.push_back(rng.uniform_int(m.cfg.vocab_size));
  return t;
}

}  // namespace

TEST_CASE("pretrain produces a frozen model that beats the uniform bound") {
  const BackboneModel& model = small_backbone();
  CHECK(model.frozen);
  StreamConfig c = small_config();
  TaskDataset corpus =
      generate_pretrain_corpus(c.backbone, c.family, c.backbone.seed, 2000, 300);
  const double ppl = mean_lm_perplexity(model, nullptr, corpus.valid());
  CHECK(ppl < static_cast<double>(model.cfg.vocab_size));
}

TEST_CASE("pretrain refuses zero steps") {
  StreamConfig c = small_config();
  c.backbone.pretrain_steps = 0;
  TaskDataset corpus = generate_pretrain_corpus(c.backbone, c.family, 1, 50, 10);
  CHECK_THROWS_WITH_AS(pretrain(corpus, c.backbone),
                       doctest::Contains("untrained"), std::runtime_error);
}

TEST_CASE("pretrain rejects an empty corpus") {
  StreamConfig c = small_config();
  TaskDataset empty("empty", {}, {}, {});
  CHECK_THROWS(pretrain(empty, c.backbone));
}

TEST_CASE("pretrain is bit-deterministic in corpus and seed") {
  StreamConfig c = small_config();
  c.backbone.pretrain_steps = 60;
  TaskDataset corpus = generate_pretrain_corpus(c.backbone, c.family, 3, 400, 50);
  TaskDataset corpus2 = generate_pretrain_corpus(c.backbone, c.family, 3, 400, 50);
  BackboneModel a = pretrain(corpus, c.backbone);
  BackboneModel b = pretrain(corpus2, c.backbone);
  CHECK(a.weight_checksum() == b.weight_checksum());
}

TEST_CASE("zero-delta adapters do not perturb logits") {
  const BackboneModel& model = small_backbone();
  AdapterConfig acfg = small_config().adapter;
  acfg.seed = 99;
  const std::vector<int> x = sample_tokens(model, 5, 10);
  ForwardOut base = forward(model, nullptr, x);

  SUBCASE("fresh init has B = 0") {
    AdapterWeights fresh = init_adapter(acfg, model);
    ForwardOut with = forward(model, &fresh, x);
    CHECK(bit_equal(base.lm_logits, with.lm_logits));
    CHECK(bit_equal(base.cls_logits, with.cls_logits));
  }
  SUBCASE("A = 0 with nonzero B is also inert") {
    AdapterWeights w = init_adapter(acfg, model);
    for (auto& e : w.entries) {
      std::fill(e.a.data->begin(), e.a.data->end(), 0.0);
      Rng rng(7);
      for (double& v : *e.b.data) v = rng.gaussian(0.0, 0.3);
    }
    ForwardOut with = forward(model, &w, x);
    CHECK(bit_equal(base.lm_logits, with.lm_logits));
    CHECK(bit_equal(base.cls_logits, with.cls_logits));
  }
}

TEST_CASE("adapter forward matches a dense materialization oracle") {
  const BackboneModel& model = small_backbone();
  AdapterConfig acfg = small_config().adapter;
  acfg.seed = 123;
  AdapterWeights w = init_adapter(acfg, model);
  Rng rng(17);
  for (auto& e : w.entries) {
    for (double& v : *e.a.data) v = rng.gaussian(0.0, 0.1);
    for (double& v : *e.b.data) v = rng.gaussian(0.0, 0.1);
  }

  // Oracle: fold scale * A^T B^T into the projection weights and run plain.
  BackboneModel dense = model.clone();
  for (const auto& e : w.entries) {
    REQUIRE((e.point == "blk0.q" || e.point == "blk0.v"));
    Tensor& target = e.point == "blk0.q" ? dense.blocks[0].wq : dense.blocks[0].wv;
    NoGradGuard ng;
    Tensor delta = matmul(e.a, e.b, true, true);  // [k, d]
    for (size_t i = 0; i < target.numel(); ++i) {
      (*target.data)[i] += w.scale * (*delta.data)[i];
    }
  }
  const std::vector<int> x = sample_tokens(model, 31, 10);
  ForwardOut got = forward(model, &w, x);
  ForwardOut ref = forward(dense, nullptr, x);
  for (size_t i = 0; i < got.lm_logits.numel(); ++i) {
    CHECK(std::abs((*got.lm_logits.data)[i] - (*ref.lm_logits.data)[i]) < 1e-12);
  }
  for (size_t i = 0; i < got.cls_logits.numel(); ++i) {
    CHECK(std::abs((*got.cls_logits.data)[i] - (*ref.cls_logits.data)[i]) < 1e-12);
  }
}

TEST_CASE("forward input validation") {
  const BackboneModel& model = small_backbone();
  std::vector<int> bad = {0, 1, model.cfg.vocab_size};
  CHECK_THROWS_WITH_AS(forward(model, nullptr, bad),
                       doctest::Contains("vocabulary"), std::runtime_error);
  AdapterConfig acfg = small_config().adapter;
  acfg.seed = 1;
  AdapterWeights w = init_adapter(acfg, model);
  w.entries[0].a = Tensor::zeros({2, 99}, true);  // wrong k
  CHECK_THROWS_WITH_AS(forward(model, &w, sample_tokens(model, 2, 8)),
                       doctest::Contains("incompatible"), std::runtime_error);
}

TEST_CASE("checksum is invariant under forwards and adapter training") {
  const BackboneModel& model = small_backbone();
  const uint64_t c0 = model.weight_checksum();
  StreamConfig cfg = small_config();
  std::vector<TaskDataset> stream = generate_stream(cfg);
  AdapterConfig acfg = cfg.adapter;
  acfg.steps = 30;
  acfg.seed = 3;
  AdapterWeights w = init_adapter(acfg, model);
  train_task(model, w, stream[0], acfg);
  CHECK(model.weight_checksum() == c0);
  forward(model, &w, stream[0].valid()[0].tokens);
  CHECK(model.weight_checksum() == c0);
}

TEST_CASE("adapter parameter count is r(d+k) per point and under 2 percent") {
  BackboneConfig cfg;  // default desk-scale dims
  BackboneModel model = BackboneModel::init(cfg, 1);
  AdapterConfig acfg;
  acfg.rank = 2;
  acfg.seed = 1;
  AdapterWeights w = init_adapter(acfg, model);
  size_t expect = 0;
  for (const InjectionPoint& p : model.injection_points()) {
    expect += static_cast<size_t>(acfg.rank) * (p.in_dim + p.out_dim);
  }
  CHECK(w.param_count() == expect);
  CHECK(static_cast<double>(w.param_count()) / model.param_count() < 0.02);
}

TEST_CASE("concurrent forwards on the shared frozen model are deterministic") {
  const BackboneModel& model = small_backbone();
  std::vector<std::vector<int>> inputs;
  for (int i = 0; i < 6; ++i) inputs.push_back(sample_tokens(model, 100 + i, 10));
  std::vector<std::vector<double>> seq(inputs.size()), par(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    seq[i] = *forward(model, nullptr, inputs[i]).lm_logits.data;
  }
  std::vector<std::thread> threads;
  for (size_t i = 0; i < inputs.size(); ++i) {
    threads.emplace_back(
        [&, i]() { par[i] = *forward(model, nullptr, inputs[i]).lm_logits.data; });
  }
  for (auto& t : threads) t.join();
  for (size_t i = 0; i < inputs.size(); ++i) CHECK(seq[i] == par[i]);
}

TEST_CASE("backbone container round trip") {
  const BackboneModel& model = small_backbone();
  const std::string path = "/tmp/cola_test_backbone.bin";
  save_backbone(model, path);
  BackboneModel loaded = load_backbone(path);
  CHECK(loaded.frozen);
  CHECK(loaded.cfg.vocab_size == model.cfg.vocab_size);
  const std::vector<int> x = sample_tokens(model, 77, 10);
  ForwardOut a = forward(model, nullptr, x);
  ForwardOut b = forward(loaded, nullptr, x);
  // Weights narrow to f32 on disk; logits agree to that precision.
  for (size_t i = 0; i < a.lm_logits.numel(); ++i) {
    CHECK(std::abs((*a.lm_logits.data)[i] - (*b.lm_logits.data)[i]) < 1e-4);
  }
  // And a reloaded file is byte-stable.
  save_backbone(loaded, path + "2");
  CHECK(read_file(path) == read_file(path + "2"));
  std::remove(path.c_str());
  std::remove((path + "2").c_str());
}
