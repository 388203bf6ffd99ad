#include "cola/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>

#include <json.hpp>

#include "cola/nn.hpp"
#include "cola/ops.hpp"
#include "cola/selection.hpp"
#include "cola/serialize.hpp"

namespace cola {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct TaskSpec {
  std::vector<int> background;          // band tokens
  std::vector<std::vector<int>> markers;  // per class, markers_per_class tokens
};

void validate_family(const TaskFamilyParams& f, int vocab, int n_tasks) {
  if (n_tasks < 2) throw std::runtime_error("stream: need at least 2 tasks");
  if (f.n_classes < 2) throw std::runtime_error("stream: need at least 2 classes");
  if (f.markers_per_class < 1) throw std::runtime_error("stream: markers_per_class < 1");
  const int slice = vocab / n_tasks;
  const int marker_tokens = f.n_classes * f.markers_per_class;
  if (slice < marker_tokens + 2) {
    throw std::runtime_error(
        "stream: degenerate family (vocabulary slice of " + std::to_string(slice) +
        " tokens cannot host " + std::to_string(marker_tokens) +
        " markers per task; fewer usable patterns than tasks require)");
  }
  if (f.marker_copies < 1 || f.marker_copies >= f.seq_len) {
    throw std::runtime_error("stream: marker_copies out of range");
  }
}

// Marker tokens are dealt to classes through a per-task permutation, so the
// same physical tokens mean different labels in different tasks and the
// frozen head's generic token-to-class habit must be re-mapped per task.
TaskSpec slice_spec(int slice_index, int slice_width, const TaskFamilyParams& f,
                    Rng perm_rng) {
  TaskSpec spec;
  const int base = slice_index * slice_width;
  const int marker_tokens = f.n_classes * f.markers_per_class;
  for (int t = 0; t < slice_width - marker_tokens; ++t) spec.background.push_back(base + t);
  std::vector<int> pool;
  for (int k = 0; k < marker_tokens; ++k) {
    pool.push_back(base + slice_width - marker_tokens + k);
  }
  perm_rng.shuffle(pool);
  size_t next = 0;
  for (int c = 0; c < f.n_classes; ++c) {
    std::vector<int> ms;
    for (int k = 0; k < f.markers_per_class; ++k) ms.push_back(pool[next++]);
    spec.markers.push_back(std::move(ms));
  }
  return spec;
}

Example make_example(const TaskSpec& spec, const TaskFamilyParams& f, int label,
                     Rng& rng) {
  Example e;
  e.label = label;
  e.tokens.resize(f.seq_len);
  for (int t = 0; t < f.seq_len; ++t) {
    e.tokens[t] = spec.background[rng.uniform_int(static_cast<int>(spec.background.size()))];
  }
  const auto& ms = spec.markers[label];
  const int marker = ms[rng.uniform_int(static_cast<int>(ms.size()))];
  std::vector<int> positions(f.seq_len);
  std::iota(positions.begin(), positions.end(), 0);
  rng.shuffle(positions);
  for (int k = 0; k < f.marker_copies; ++k) e.tokens[positions[k]] = marker;
  return e;
}

std::vector<Example> make_split(const TaskSpec& spec, const TaskFamilyParams& f, int n,
                                Rng& rng) {
  std::vector<Example> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(make_example(spec, f, i % f.n_classes, rng));
  return out;
}

TaskDataset make_task(const std::string& task_id, const TaskSpec& spec,
                      const TaskFamilyParams& f, Rng rng) {
  Rng tr = rng.child("train"), vr = rng.child("valid"), sr = rng.child("test");
  return TaskDataset(task_id, make_split(spec, f, f.train_n, tr),
                     make_split(spec, f, f.valid_n, vr),
                     make_split(spec, f, f.test_n, sr));
}

std::string task_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "task-%02d", i);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

size_t serialized_example_bytes(const Example& e) {
  // u32 token count, u16 per token, i32 label.
  return 4 + 2 * e.tokens.size() + 4;
}

std::vector<TaskDataset> generate_stream(const StreamConfig& config) {
  const int vocab = config.backbone.vocab_size;
  validate_family(config.family, vocab, config.n_tasks);
  const int slice_width = vocab / config.n_tasks;
  Rng rng = Rng(config.seed).child("stream");
  std::vector<TaskDataset> tasks;
  tasks.reserve(config.n_tasks);
  for (int i = 0; i < config.n_tasks; ++i) {
    TaskSpec spec = slice_spec(i, slice_width, config.family, rng.child("perm", i));
    tasks.push_back(make_task(task_name(i), spec, config.family, rng.child("task", i)));
  }
  return tasks;
}

TaskDataset generate_pretrain_corpus(const BackboneConfig& cfg,
                                     const TaskFamilyParams& family, uint64_t seed,
                                     int n_train, int n_valid) {
  const int marker_tokens = family.n_classes * family.markers_per_class;
  const int window = std::max(marker_tokens + 4, 10);
  if (cfg.vocab_size < window) throw std::runtime_error("pretrain corpus: vocab too small");
  Rng rng = Rng(seed).child("pretrain-corpus");
  auto gen = [&](int n, Rng r) {
    std::vector<Example> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
      const int offset = r.uniform_int(cfg.vocab_size - window + 1);
      Example e;
      e.tokens.resize(family.seq_len);
      for (int t = 0; t < family.seq_len; ++t) {
        e.tokens[t] = offset + r.uniform_int(window - marker_tokens);
      }
      // Any window token can serve as the marker; its class is a fixed
      // function of token identity so the head becomes marker-sensitive
      // without memorizing task semantics.
      const int marker = offset + window - marker_tokens + r.uniform_int(marker_tokens);
      std::vector<int> positions(family.seq_len);
      std::iota(positions.begin(), positions.end(), 0);
      r.shuffle(positions);
      for (int k = 0; k < family.marker_copies; ++k) e.tokens[positions[k]] = marker;
      e.label = marker % family.n_classes;
      out.push_back(std::move(e));
    }
    return out;
  };
  return TaskDataset("pretrain", gen(n_train, rng.child("train")),
                     gen(n_valid, rng.child("valid")), {});
}

std::pair<TaskDataset, TaskDataset> generate_transfer_pair(const StreamConfig& config,
                                                           uint64_t seed, bool related) {
  const TaskFamilyParams& f = config.family;
  const int vocab = config.backbone.vocab_size;
  validate_family(f, vocab, 2);
  const int slice_width = vocab / 2;
  Rng rng = Rng(seed).child("transfer-pair");
  TaskSpec a = slice_spec(0, slice_width, f, rng.child("perm-a"));
  TaskSpec b;
  if (related) {
    // Same background band; first half of the classes keep task A's markers
    // with identical class meaning, the rest come from the far slice.
    b.background = a.background;
    TaskSpec other = slice_spec(1, slice_width, f, rng.child("perm-b"));
    for (int c = 0; c < f.n_classes; ++c) {
      b.markers.push_back(c < f.n_classes / 2 ? a.markers[c] : other.markers[c]);
    }
  } else {
    b = slice_spec(1, slice_width, f, rng.child("perm-b"));
  }
  return {make_task("transfer-a", a, f, rng.child("a")),
          make_task("transfer-b", b, f, rng.child("b"))};
}

double probe_accuracy(const BackboneModel& model,
                      const std::vector<Example>& train_examples,
                      const std::vector<Example>& eval_examples, uint64_t seed,
                      int steps, double lr) {
  if (train_examples.empty() || eval_examples.empty()) {
    throw std::runtime_error("probe: empty examples");
  }
  const int d = model.cfg.embed_dim;
  const int c = model.cfg.n_classes;
  auto features = [&](const std::vector<Example>& ex) {
    NoGradGuard ng;
    Tensor feats = Tensor::zeros({static_cast<int>(ex.size()), d});
    std::vector<int> labels;
    labels.reserve(ex.size());
    for (size_t i = 0; i < ex.size(); ++i) {
      ForwardOut out = forward(model, nullptr, ex[i].tokens);
      std::memcpy(feats.data->data() + i * d, out.pooled.data->data(),
                  sizeof(double) * d);
      labels.push_back(ex[i].label);
    }
    return std::make_pair(feats, labels);
  };
  auto [train_x, train_y] = features(train_examples);
  auto [eval_x, eval_y] = features(eval_examples);

  Rng rng = Rng(seed).child("probe");
  Tensor w = Tensor::randn({d, c}, rng, 0.01, true);
  Tensor b = Tensor::zeros({1, c}, true);
  Adam opt({w, b}, lr);
  for (int s = 0; s < steps; ++s) {
    Tensor loss = softmax_xent(add_rowvec(matmul(train_x, w), b), train_y);
    backward(loss);
    opt.step();
  }
  NoGradGuard ng;
  Tensor logits = add_rowvec(matmul(eval_x, w), b);
  int correct = 0;
  for (size_t i = 0; i < eval_y.size(); ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (logits.at(static_cast<int>(i), j) > logits.at(static_cast<int>(i), best)) best = j;
    }
    if (best == eval_y[i]) ++correct;
  }
  return static_cast<double>(correct) / eval_y.size();
}

double spearman_rank_correlation(const std::vector<double>& x,
                                 const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::runtime_error("spearman: need two same-length series");
  }
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  const double mx = mean_of(rx), my = mean_of(ry);
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / std::sqrt(dx * dy);
}

namespace {

uint64_t derive_seed(uint64_t seed, const std::string& label, uint64_t n) {
  return Rng(seed).child(label).child(n).next_u64();
}

double routed_accuracy(const BackboneModel& model, const LatentStore& store,
                       const std::vector<Example>& test, const std::string& own_id,
                       int threads, double* routing_acc,
                       std::map<std::string, AdapterWeights>& cache) {
  int correct = 0, routed_home = 0;
  for (const Example& e : test) {
    SelectionResult sel = select_adapter(store, model, e.tokens, std::nullopt, threads);
    if (sel.chosen == own_id) ++routed_home;
    auto it = cache.find(sel.chosen);
    if (it == cache.end()) {
      it = cache.emplace(sel.chosen, devectorize(fetch_adapter(store, sel.chosen))).first;
    }
    NoGradGuard ng;
    ForwardOut out = forward(model, &it->second, e.tokens);
    int best = 0;
    for (int j = 1; j < model.cfg.n_classes; ++j) {
      if (out.cls_logits.at(0, j) > out.cls_logits.at(0, best)) best = j;
    }
    if (best == e.label) ++correct;
  }
  if (routing_acc != nullptr) {
    *routing_acc = static_cast<double>(routed_home) / test.size();
  }
  return static_cast<double>(correct) / test.size();
}

std::vector<SweepRow> sweep_core(const BackboneModel& model,
                                 const std::vector<AdapterSnapshot>& originals,
                                 const std::vector<std::vector<Example>>& test_sets,
                                 const StreamConfig& config, double* baseline_out) {
  CaeConfig scfg = config.cae;
  scfg.seed = derive_seed(config.seed, "sweep-cae", 0);
  const SnapshotLayout& layout = originals.front().layout;
  CaeModel cae = CaeModel::create(static_cast<int>(layout.total), layout, scfg);

  std::vector<SweepRow> rows;
  auto eval_decoded = [&](const CaeModel& m) {
    double total = 0.0;
    double min_score = 2.0, sum_score = 0.0;
    for (size_t j = 0; j < originals.size(); ++j) {
      LatentCode code = m.encode(originals[j]);
      AdapterWeights w = devectorize(m.decode(code));
      total += classification_accuracy(model, &w, test_sets[j]);
      min_score = std::min(min_score, code.reconstruction_score);
      sum_score += code.reconstruction_score;
    }
    SweepRow row;
    row.avg_acc = total / static_cast<double>(originals.size());
    row.min_score = min_score;
    row.score = sum_score / static_cast<double>(originals.size());
    return row;
  };

  TrainCaeOptions opts;
  opts.milestones = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.97};
  opts.check_every = 2;
  opts.sink = [&](double, const CaeModel& m) { rows.push_back(eval_decoded(m)); };
  train_cae(cae, originals, scfg.threshold, scfg.max_steps, opts);
  rows.push_back(eval_decoded(cae));  // converged checkpoint (score >= threshold)

  // Score-1.0 row: the original adapters themselves.
  double baseline = 0.0;
  for (size_t j = 0; j < originals.size(); ++j) {
    AdapterWeights w = devectorize(originals[j]);
    baseline += classification_accuracy(model, &w, test_sets[j]);
  }
  baseline /= static_cast<double>(originals.size());
  rows.push_back({1.0, 1.0, baseline});
  if (baseline_out != nullptr) *baseline_out = baseline;
  return rows;
}

}  // namespace

RunReport run_cola(const BackboneModel& model, const StreamConfig& config,
                   LatentStore* store_out) {
  if (!model.frozen) throw std::runtime_error("run_cola: backbone must be frozen");
  RunReport report;
  report.seed = config.seed;
  const uint64_t checksum0 = model.weight_checksum();
  report.backbone_checksum = checksum0;

  const int k = config.n_tasks;
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  if (!config.task_order.empty()) {
    if (static_cast<int>(config.task_order.size()) != k) {
      throw std::runtime_error("run_cola: task_order size mismatch");
    }
    order = config.task_order;
  }

  Clock::time_point t0 = Clock::now();
  std::vector<TaskDataset> stream = generate_stream(config);
  std::vector<std::vector<Example>> test_sets(k);  // measurement copies, by task index
  for (int i = 0; i < k; ++i) test_sets[i] = stream[i].take_test();
  report.timing_seconds["generate_stream"] = seconds_since(t0);

  const SnapshotLayout layout = layout_for(config.adapter, model);
  Memory memory(CaeModel::create(static_cast<int>(layout.total), layout, config.cae),
                config.buffer_capacity);

  std::vector<AdapterSnapshot> originals;  // adapter-style baseline storage
  originals.reserve(k);
  std::vector<double> post_train_acc(k, 0.0);
  report.acc_matrix.assign(k, std::vector<double>(k, -1.0));
  report.task_order.clear();
  bool audit_ok = true;
  bool checksums_ok = true;

  t0 = Clock::now();
  for (int step = 0; step < k; ++step) {
    const int ti = order[step];
    TaskDataset& task = stream[ti];
    report.task_order.push_back(task.task_id());

    AdapterConfig acfg = config.adapter;
    // One shared init seed: fresh adapters start from the same A across
    // tasks, so the encoded population varies only where training moved it.
    acfg.seed = derive_seed(config.seed, "adapter-init", 0);
    AdapterWeights adapter = init_adapter(acfg, model);
    train_task(model, adapter, task, acfg);
    post_train_acc[ti] = classification_accuracy(model, &adapter, test_sets[ti]);

    AdapterSnapshot snap = vectorize(adapter, task.task_id());
    originals.push_back(snap);
    memory.submit(std::move(snap));

    task.destroy();
    audit_ok = audit_ok && task.destroyed();
    checksums_ok = checksums_ok && model.weight_checksum() == checksum0;

    // Accuracy matrix row: every already-learned task, via its current
    // decoded form (or the raw buffered snapshot when not yet encoded).
    for (int past = 0; past <= step; ++past) {
      const int tj = order[past];
      const std::string& id = stream[tj].task_id();
      std::optional<AdapterWeights> w;
      auto it = memory.codes().find(id);
      if (it != memory.codes().end()) {
        w = devectorize(memory.cae().decode(it->second));
      } else {
        for (const AdapterSnapshot& buffered : memory.buffer().entries()) {
          if (buffered.task_id == id) w = devectorize(buffered);
        }
      }
      if (w.has_value()) {
        report.acc_matrix[step][past] =
            classification_accuracy(model, &*w, test_sets[tj]);
      }
    }
  }
  report.timing_seconds["cola_train"] = seconds_since(t0);

  if (config.run_sweep) {
    t0 = Clock::now();
    std::vector<std::vector<Example>> ordered_tests;
    for (int step = 0; step < k; ++step) ordered_tests.push_back(test_sets[order[step]]);
    report.sweep = sweep_core(model, originals, ordered_tests, config,
                              &report.baseline_avg_acc);
    std::vector<double> scores, accs;
    for (const SweepRow& r : report.sweep) {
      scores.push_back(r.score);
      accs.push_back(r.avg_acc);
    }
    report.sweep_spearman = spearman_rank_correlation(scores, accs);
    report.timing_seconds["fidelity_sweep"] = seconds_since(t0);
  } else {
    double baseline = 0.0;
    for (int step = 0; step < k; ++step) {
      AdapterWeights w = devectorize(originals[step]);
      baseline += classification_accuracy(model, &w, test_sets[order[step]]);
    }
    report.baseline_avg_acc = baseline / k;
  }

  t0 = Clock::now();
  LatentStore store = memory.finalize();
  report.timing_seconds["finalize"] = seconds_since(t0);

  // Final evaluation: task labels withheld, adapters chosen by perplexity.
  t0 = Clock::now();
  report.per_task.resize(k);
  std::map<std::string, AdapterWeights> cache;
  std::vector<double> final_accs, forgets, routing;
  for (int i = 0; i < k; ++i) {
    TaskResult& r = report.per_task[i];
    r.task_id = task_name(i);
    r.post_train_acc = post_train_acc[i];
    r.recon_score = store.codes.at(r.task_id).reconstruction_score;
    AdapterWeights own = devectorize(fetch_adapter(store, r.task_id));
    r.final_id_given_acc = classification_accuracy(model, &own, test_sets[i]);
    r.final_routed_acc = routed_accuracy(model, store, test_sets[i], r.task_id,
                                         config.selection_threads, &r.routing_acc, cache);
    r.forgetting = r.post_train_acc - r.final_routed_acc;
    final_accs.push_back(r.final_routed_acc);
    forgets.push_back(r.forgetting);
    routing.push_back(r.routing_acc);
  }
  report.avg_final_acc_cola = mean_of(final_accs);
  report.avg_forgetting_cola = mean_of(forgets);
  report.routing_accuracy = mean_of(routing);
  report.timing_seconds["routed_eval"] = seconds_since(t0);

  // Vanilla baseline: one model sequentially fine-tuned in full, on an
  // identical regenerated stream.
  if (config.run_vanilla) {
    t0 = Clock::now();
    std::vector<TaskDataset> vstream = generate_stream(config);
    BackboneModel vmodel = model.clone();
    vmodel.frozen = false;
    vmodel.set_requires_grad(true);
    report.vanilla_matrix.assign(k, std::vector<double>(k, -1.0));
    for (int step = 0; step < k; ++step) {
      const int ti = order[step];
      TaskDataset& task = vstream[ti];
      Adam opt(vmodel.params(), config.vanilla_lr);
      Rng rng = Rng(derive_seed(config.seed, "vanilla", ti)).child("batches");
      const auto& train = task.train();
      const int bsz = std::min<int>(config.adapter.batch_size,
                                    static_cast<int>(train.size()));
      for (int s = 0; s < config.adapter.steps; ++s) {
        std::vector<const Example*> batch;
        for (int b = 0; b < bsz; ++b) {
          batch.push_back(&train[rng.uniform_int(static_cast<int>(train.size()))]);
        }
        Tensor loss = batch_loss(vmodel, nullptr, batch, config.adapter.lm_weight,
                                 config.adapter.cls_weight);
        if (!std::isfinite(loss.scalar())) {
          throw std::runtime_error("vanilla: loss diverged");
        }
        backward(loss);
        opt.step();
      }
      task.destroy();
      for (int past = 0; past <= step; ++past) {
        const int tj = order[past];
        report.vanilla_matrix[step][past] =
            classification_accuracy(vmodel, nullptr, test_sets[tj]);
      }
    }
    std::vector<double> vfinal, vforget;
    for (int past = 0; past < k; ++past) {
      const double final_acc = report.vanilla_matrix[k - 1][past];
      double peak = final_acc;
      for (int step = past; step < k; ++step) {
        peak = std::max(peak, report.vanilla_matrix[step][past]);
      }
      vfinal.push_back(final_acc);
      vforget.push_back(peak - final_acc);
    }
    report.avg_final_acc_vanilla = mean_of(vfinal);
    report.avg_forgetting_vanilla = mean_of(vforget);
    report.timing_seconds["vanilla_baseline"] = seconds_since(t0);
  }

  // Adapter-style baseline: raw per-task adapters, same perplexity routing.
  if (config.run_adapter_style) {
    t0 = Clock::now();
    std::vector<AdapterWeights> raw;
    std::vector<std::string> ids;
    for (int step = 0; step < k; ++step) {
      raw.push_back(devectorize(originals[step]));
      ids.push_back(originals[step].task_id);
    }
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
      int correct = 0;
      for (const Example& e : test_sets[i]) {
        size_t best = 0;
        double best_ppl = 0.0;
        for (size_t a = 0; a < raw.size(); ++a) {
          const double p = perplexity(model, &raw[a], e.tokens);
          if (a == 0 || p < best_ppl) {
            best_ppl = p;
            best = a;
          }
        }
        NoGradGuard ng;
        ForwardOut out = forward(model, &raw[best], e.tokens);
        int arg = 0;
        for (int j = 1; j < model.cfg.n_classes; ++j) {
          if (out.cls_logits.at(0, j) > out.cls_logits.at(0, arg)) arg = j;
        }
        if (arg == e.label) ++correct;
      }
      total += static_cast<double>(correct) / test_sets[i].size();
    }
    report.avg_final_acc_adapter_style = total / k;
    report.timing_seconds["adapter_style_baseline"] = seconds_since(t0);
  }

  ReplayBaselineConfig replay;
  replay.examples_per_task = static_cast<size_t>(config.family.train_n);
  replay.bytes_per_example = test_sets.empty() || test_sets[0].empty()
                                 ? 0
                                 : serialized_example_bytes(test_sets[0][0]);
  report.storage = storage_report(store, backbone_bytes(model).size(),
                                  memory.recorded_snapshot_bytes(),
                                  memory.max_buffer_bytes(), replay);
  report.no_rehearsal_audit_passed = audit_ok;
  report.checksum_ok = checksums_ok && model.weight_checksum() == checksum0;
  if (store_out != nullptr) *store_out = std::move(store);
  return report;
}

MultiRunReport run_cola_multi(const BackboneModel& model, const StreamConfig& config) {
  MultiRunReport multi;
  std::vector<double> cola, vanilla, routing;
  for (int ord = 0; ord < std::max(1, config.n_orders); ++ord) {
    StreamConfig c = config;
    c.task_order.resize(config.n_tasks);
    std::iota(c.task_order.begin(), c.task_order.end(), 0);
    if (ord > 0) {
      Rng rng = Rng(config.seed).child("order", static_cast<uint64_t>(ord));
      rng.shuffle(c.task_order);
    }
    RunReport r = run_cola(model, c);
    cola.push_back(r.avg_final_acc_cola);
    if (r.avg_final_acc_vanilla >= 0.0) vanilla.push_back(r.avg_final_acc_vanilla);
    routing.push_back(r.routing_accuracy);
    multi.per_order.push_back(std::move(r));
  }
  multi.mean_avg_final_acc_cola = mean_of(cola);
  multi.mean_avg_final_acc_vanilla = vanilla.empty() ? -1.0 : mean_of(vanilla);
  multi.mean_routing_accuracy = mean_of(routing);
  return multi;
}

namespace {

TransferSeedResult transfer_one(const BackboneModel& model, const StreamConfig& config,
                                uint64_t seed, bool related) {
  auto [task_a, task_b] = generate_transfer_pair(config, seed, related);

  AdapterConfig acfg = config.adapter;
  acfg.seed = Rng(seed).child("transfer-adapter-a").next_u64();
  AdapterWeights adapter_a = init_adapter(acfg, model);
  train_task(model, adapter_a, task_a, acfg);

  const SnapshotLayout layout = layout_for(config.adapter, model);
  CaeConfig ccfg = config.cae;
  ccfg.seed = Rng(seed).child("transfer-cae").next_u64();
  Memory memory(CaeModel::create(static_cast<int>(layout.total), layout, ccfg), 1);
  memory.submit(vectorize(adapter_a, task_a.task_id()));
  task_a.destroy();
  LatentStore store = memory.finalize();

  std::vector<std::vector<int>> sample;
  const int n_sample = std::min<int>(config.warm_start_sample,
                                     static_cast<int>(task_b.train().size()));
  for (int i = 0; i < n_sample; ++i) sample.push_back(task_b.train()[i].tokens);

  TransferSeedResult result;
  result.seed = seed;
  result.donor = pick_warm_start(store, model, sample);

  AdapterConfig curve_cfg = config.adapter;
  curve_cfg.eval_every = std::max(1, config.adapter.steps / 40);

  curve_cfg.seed = Rng(seed).child("transfer-scratch").next_u64();
  AdapterWeights scratch = init_adapter(curve_cfg, model);
  TaskMetrics ms = train_task(model, scratch, task_b, curve_cfg);
  result.scratch.curve = ms.val_curve;
  result.scratch.final_acc = ms.final_val_accuracy;

  curve_cfg.seed = Rng(seed).child("transfer-warm").next_u64();
  AdapterSnapshot donor_snap = fetch_adapter(store, result.donor);
  AdapterWeights warm = init_adapter(curve_cfg, model, &donor_snap);
  TaskMetrics mw = train_task(model, warm, task_b, curve_cfg);
  result.warm.curve = mw.val_curve;
  result.warm.final_acc = mw.final_val_accuracy;
  task_b.destroy();

  result.threshold = 0.9 * result.scratch.final_acc;
  auto steps_to = [&](const TransferArm& arm) {
    for (const auto& [step, acc] : arm.curve) {
      if (acc >= result.threshold - 1e-12) return step;
    }
    return -1;
  };
  result.scratch.steps_to_threshold = steps_to(result.scratch);
  result.warm.steps_to_threshold = steps_to(result.warm);
  result.warm_strictly_faster =
      result.warm.steps_to_threshold >= 0 && result.scratch.steps_to_threshold >= 0 &&
      result.warm.steps_to_threshold < result.scratch.steps_to_threshold;
  return result;
}

}  // namespace

TransferReport run_transfer_probe(const BackboneModel& model, const StreamConfig& config,
                                  int n_seeds) {
  TransferReport report;
  for (int s = 0; s < n_seeds; ++s) {
    const uint64_t seed = derive_seed(config.seed, "transfer-seed", s);
    report.related.push_back(transfer_one(model, config, seed, true));
    report.unrelated.push_back(transfer_one(model, config, seed, false));
  }
  return report;
}

SweepReport run_fidelity_sweep(const BackboneModel& model, const StreamConfig& config) {
  std::vector<TaskDataset> stream = generate_stream(config);
  const int k = config.n_tasks;
  std::vector<std::vector<Example>> test_sets(k);
  for (int i = 0; i < k; ++i) test_sets[i] = stream[i].take_test();
  std::vector<AdapterSnapshot> originals;
  for (int i = 0; i < k; ++i) {
    AdapterConfig acfg = config.adapter;
    acfg.seed = derive_seed(config.seed, "adapter-init", 0);
    AdapterWeights adapter = init_adapter(acfg, model);
    train_task(model, adapter, stream[i], acfg);
    originals.push_back(vectorize(adapter, stream[i].task_id()));
    stream[i].destroy();
  }
  SweepReport report;
  report.rows = sweep_core(model, originals, test_sets, config, &report.baseline_avg_acc);
  std::vector<double> scores, accs;
  for (const SweepRow& r : report.rows) {
    scores.push_back(r.score);
    accs.push_back(r.avg_acc);
  }
  report.spearman = spearman_rank_correlation(scores, accs);
  return report;
}

namespace {

nlohmann::ordered_json storage_json(const StorageReport& s) {
  nlohmann::ordered_json j;
  j["n_tasks"] = s.n_tasks;
  j["backbone_bytes"] = s.backbone_bytes;
  j["adapter_style_bytes"] = s.adapter_style_bytes;
  j["decoder_bytes"] = s.decoder_bytes;
  j["latents_bytes"] = s.latents_bytes;
  j["store_total_bytes"] = s.store_total_bytes;
  j["buffer_bytes"] = s.buffer_bytes;
  j["replay_buffer_bytes"] = s.replay_buffer_bytes;
  j["per_task_decoder_reading_bytes"] = s.per_task_decoder_reading_bytes;
  j["break_even_tasks"] = s.break_even_tasks;
  j["latent_dim"] = s.latent_dim;
  j["input_width"] = s.input_width;
  // Overhead table: {train, deploy} per method, in bytes.
  j["table"] = {
      {"cola", {{"train", s.backbone_bytes + s.store_total_bytes},
                {"deploy", s.store_total_bytes}}},
      {"adapter_style", {{"train", s.backbone_bytes + s.adapter_style_bytes},
                         {"deploy", s.adapter_style_bytes}}},
      {"vanilla", {{"train", s.backbone_bytes}, {"deploy", s.backbone_bytes}}},
      {"replay", {{"train", s.backbone_bytes + s.replay_buffer_bytes},
                  {"deploy", s.backbone_bytes + s.replay_buffer_bytes}}},
  };
  return j;
}

nlohmann::ordered_json metrics_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["task_order"] = r.task_order;
  j["backbone_checksum"] = r.backbone_checksum;
  j["checksum_ok"] = r.checksum_ok;
  j["no_rehearsal_audit_passed"] = r.no_rehearsal_audit_passed;
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const TaskResult& t : r.per_task) {
    tasks.push_back({{"task_id", t.task_id},
                     {"post_train_acc", t.post_train_acc},
                     {"final_id_given_acc", t.final_id_given_acc},
                     {"final_routed_acc", t.final_routed_acc},
                     {"routing_acc", t.routing_acc},
                     {"forgetting", t.forgetting},
                     {"recon_score", t.recon_score}});
  }
  j["per_task"] = std::move(tasks);
  j["acc_matrix"] = r.acc_matrix;
  j["vanilla_matrix"] = r.vanilla_matrix;
  j["baseline_avg_acc"] = r.baseline_avg_acc;
  j["avg_final_acc_cola"] = r.avg_final_acc_cola;
  j["avg_final_acc_vanilla"] = r.avg_final_acc_vanilla;
  j["avg_final_acc_adapter_style"] = r.avg_final_acc_adapter_style;
  j["avg_forgetting_cola"] = r.avg_forgetting_cola;
  j["avg_forgetting_vanilla"] = r.avg_forgetting_vanilla;
  j["routing_accuracy"] = r.routing_accuracy;
  nlohmann::ordered_json sweep = nlohmann::ordered_json::array();
  for (const SweepRow& row : r.sweep) {
    sweep.push_back({{"score", row.score},
                     {"min_score", row.min_score},
                     {"avg_acc", row.avg_acc}});
  }
  j["sweep"] = std::move(sweep);
  j["sweep_spearman"] = r.sweep_spearman;
  j["storage"] = storage_json(r.storage);
  return j;
}

}  // namespace

std::string report_json(const RunReport& report, bool metrics_only) {
  nlohmann::ordered_json j;
  j["metrics"] = metrics_json(report);
  if (!metrics_only) j["timing_seconds"] = report.timing_seconds;
  return j.dump(2);
}

std::string transfer_report_json(const TransferReport& report) {
  auto arm_json = [](const TransferArm& a) {
    nlohmann::ordered_json j;
    j["final_acc"] = a.final_acc;
    j["steps_to_threshold"] = a.steps_to_threshold;
    nlohmann::ordered_json curve = nlohmann::ordered_json::array();
    for (const auto& [step, acc] : a.curve) curve.push_back({{"step", step}, {"acc", acc}});
    j["curve"] = std::move(curve);
    return j;
  };
  auto seed_json = [&](const TransferSeedResult& s) {
    nlohmann::ordered_json j;
    j["seed"] = s.seed;
    j["donor"] = s.donor;
    j["threshold"] = s.threshold;
    j["scratch"] = arm_json(s.scratch);
    j["warm"] = arm_json(s.warm);
    j["warm_strictly_faster"] = s.warm_strictly_faster;
    return j;
  };
  nlohmann::ordered_json j;
  j["related"] = nlohmann::ordered_json::array();
  for (const auto& s : report.related) j["related"].push_back(seed_json(s));
  j["unrelated"] = nlohmann::ordered_json::array();
  for (const auto& s : report.unrelated) j["unrelated"].push_back(seed_json(s));
  return j.dump(2);
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << text;
}

std::string matrix_csv(const std::vector<std::vector<double>>& m) {
  std::string out = "after_task";
  for (size_t j = 0; j < m.size(); ++j) out += ",task_" + std::to_string(j);
  out += "\n";
  for (size_t i = 0; i < m.size(); ++i) {
    out += std::to_string(i);
    for (size_t j = 0; j < m[i].size(); ++j) {
      out += ",";
      if (m[i][j] >= 0.0) out += std::to_string(m[i][j]);
    }
    out += "\n";
  }
  return out;
}

}  // namespace

void write_report_files(const RunReport& report, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir + "/report.json", report_json(report, false));
  write_text(out_dir + "/acc_matrix.csv", matrix_csv(report.acc_matrix));
  if (!report.vanilla_matrix.empty()) {
    write_text(out_dir + "/vanilla_matrix.csv", matrix_csv(report.vanilla_matrix));
  }
  std::string per_task =
      "task_id,post_train_acc,final_id_given_acc,final_routed_acc,routing_acc,"
      "forgetting,recon_score\n";
  for (const TaskResult& t : report.per_task) {
    per_task += t.task_id + "," + std::to_string(t.post_train_acc) + "," +
                std::to_string(t.final_id_given_acc) + "," +
                std::to_string(t.final_routed_acc) + "," +
                std::to_string(t.routing_acc) + "," + std::to_string(t.forgetting) +
                "," + std::to_string(t.recon_score) + "\n";
  }
  write_text(out_dir + "/per_task.csv", per_task);
  std::string sweep = "score,min_score,avg_acc\n";
  for (const SweepRow& r : report.sweep) {
    sweep += std::to_string(r.score) + "," + std::to_string(r.min_score) + "," +
             std::to_string(r.avg_acc) + "\n";
  }
  write_text(out_dir + "/sweep.csv", sweep);
}

void write_transfer_files(const TransferReport& report, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir + "/transfer.json", transfer_report_json(report));
  std::string csv = "pair,seed,arm,step,acc\n";
  auto emit = [&csv](const char* pair, const TransferSeedResult& s) {
    for (const auto& [step, acc] : s.scratch.curve) {
      csv += std::string(pair) + "," + std::to_string(s.seed) + ",scratch," +
             std::to_string(step) + "," + std::to_string(acc) + "\n";
    }
    for (const auto& [step, acc] : s.warm.curve) {
      csv += std::string(pair) + "," + std::to_string(s.seed) + ",warm," +
             std::to_string(step) + "," + std::to_string(acc) + "\n";
    }
  };
  for (const auto& s : report.related) emit("related", s);
  for (const auto& s : report.unrelated) emit("unrelated", s);
  write_text(out_dir + "/transfer_curves.csv", csv);
}

}  // namespace cola
