#include "cola/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cola/nn.hpp"
#include "cola/ops.hpp"
#include "cola/serialize.hpp"

namespace cola {

const AdapterWeights::Entry* AdapterWeights::find(const std::string& point) const {
  for (const Entry& e : entries) {
    if (e.point == point) return &e;
  }
  return nullptr;
}

std::vector<Tensor> AdapterWeights::params() const {
  std::vector<Tensor> out;
  for (const Entry& e : entries) {
    out.push_back(e.a);
    out.push_back(e.b);
  }
  return out;
}

size_t AdapterWeights::param_count() const {
  size_t n = 0;
  for (const Entry& e : entries) n += e.a.numel() + e.b.numel();
  return n;
}

namespace {

std::vector<InjectionPoint> resolve_points(const AdapterConfig& cfg,
                                           const BackboneModel& model) {
  std::vector<InjectionPoint> all = model.injection_points();
  if (cfg.points.empty()) return all;
  std::vector<InjectionPoint> out;
  for (const std::string& name : cfg.points) {
    auto it = std::find_if(all.begin(), all.end(),
                           [&](const InjectionPoint& p) { return p.name == name; });
    if (it == all.end()) {
      throw std::runtime_error("adapter: unknown injection point '" + name + "'");
    }
    out.push_back(*it);
  }
  return out;
}

}  // namespace

SnapshotLayout layout_for(const AdapterConfig& cfg, const BackboneModel& model) {
  SnapshotLayout layout;
  layout.rank = cfg.rank;
  layout.alpha = cfg.alpha;
  uint64_t off = 0;
  for (const InjectionPoint& p : resolve_points(cfg, model)) {
    layout.entries.push_back({p.name, 'A', cfg.rank, p.in_dim, off});
    off += static_cast<uint64_t>(cfg.rank) * p.in_dim;
    layout.entries.push_back({p.name, 'B', p.out_dim, cfg.rank, off});
    off += static_cast<uint64_t>(p.out_dim) * cfg.rank;
  }
  layout.total = off;
  return layout;
}

AdapterWeights init_adapter(const AdapterConfig& cfg, const BackboneModel& model,
                            const AdapterSnapshot* warm_start) {
  if (cfg.rank <= 0) throw std::runtime_error("adapter: rank must be positive");
  std::vector<InjectionPoint> points = resolve_points(cfg, model);
  if (points.empty()) throw std::runtime_error("adapter: no injection points");
  for (const InjectionPoint& p : points) {
    if (cfg.rank > std::min(p.in_dim, p.out_dim) / 4) {
      throw std::runtime_error("adapter: rank " + std::to_string(cfg.rank) +
                               " too large for point " + p.name +
                               " (require r <= min(d,k)/4)");
    }
  }
  if (warm_start != nullptr) {
    AdapterWeights w = devectorize(*warm_start, cfg, model);
    return w;
  }
  AdapterWeights w;
  w.scale = cfg.scaling();
  Rng rng(cfg.seed);
  for (const InjectionPoint& p : points) {
    AdapterWeights::Entry e;
    e.point = p.name;
    Rng ar = rng.child(p.name);
    e.a = Tensor::randn({cfg.rank, p.in_dim}, ar, 0.02, true);
    e.b = Tensor::zeros({p.out_dim, cfg.rank}, true);
    w.entries.push_back(std::move(e));
  }
  return w;
}

TaskMetrics train_task(const BackboneModel& model, AdapterWeights& adapter,
                       const TaskDataset& data, const AdapterConfig& cfg) {
  if (!model.frozen) throw std::runtime_error("train_task: backbone must be frozen");
  if (data.train().empty()) throw std::runtime_error("train_task: empty dataset");

  TaskMetrics metrics;
  metrics.initial_val_accuracy =
      classification_accuracy(model, &adapter, data.valid().empty() ? data.train()
                                                                    : data.valid());
  if (cfg.eval_every > 0) metrics.val_curve.push_back({0, metrics.initial_val_accuracy});
  if (cfg.steps == 0) {
    metrics.final_val_accuracy = metrics.initial_val_accuracy;
    return metrics;
  }

  Adam opt(adapter.params(), cfg.lr);
  Rng batch_rng = Rng(cfg.seed).child("task-batches").child(data.task_id());
  const auto& train = data.train();
  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(train.size()));
  for (int step = 0; step < cfg.steps; ++step) {
    // Linear decay keeps late-phase Adam drift from inflating the adapter.
    opt.set_lr(cfg.lr * (1.0 - static_cast<double>(step) / cfg.steps));
    std::vector<const Example*> batch;
    batch.reserve(bsz);
    for (int i = 0; i < bsz; ++i) {
      batch.push_back(&train[batch_rng.uniform_int(static_cast<int>(train.size()))]);
    }
    Tensor loss = batch_loss(model, &adapter, batch, cfg.lm_weight, cfg.cls_weight);
    const double lval = loss.scalar();
    if (!std::isfinite(lval)) throw std::runtime_error("train_task: loss diverged");
    metrics.loss_curve.push_back(lval);
    backward(loss);
    opt.step();
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      metrics.val_curve.push_back(
          {step + 1, classification_accuracy(model, &adapter,
                                             data.valid().empty() ? data.train()
                                                                  : data.valid())});
    }
  }
  metrics.final_val_accuracy = classification_accuracy(
      model, &adapter, data.valid().empty() ? data.train() : data.valid());
  return metrics;
}

AdapterSnapshot vectorize(const AdapterWeights& adapter, const std::string& task_id) {
  AdapterSnapshot s;
  s.task_id = task_id;
  uint64_t off = 0;
  for (const AdapterWeights::Entry& e : adapter.entries) {
    s.layout.entries.push_back(
        {e.point, 'A', e.a.rows(), e.a.cols(), off});
    off += e.a.numel();
    s.layout.entries.push_back(
        {e.point, 'B', e.b.rows(), e.b.cols(), off});
    off += e.b.numel();
  }
  s.layout.total = off;
  if (!adapter.entries.empty()) {
    s.layout.rank = adapter.entries[0].a.rows();
    s.layout.alpha = adapter.scale * s.layout.rank;
  }
  s.flat.resize(off);
  for (size_t i = 0, k = 0; i < adapter.entries.size(); ++i) {
    const auto& e = adapter.entries[i];
    std::memcpy(s.flat.data() + k, e.a.data->data(), sizeof(double) * e.a.numel());
    k += e.a.numel();
    std::memcpy(s.flat.data() + k, e.b.data->data(), sizeof(double) * e.b.numel());
    k += e.b.numel();
  }
  return s;
}

AdapterWeights devectorize(const AdapterSnapshot& snapshot) {
  if (snapshot.flat.size() != snapshot.layout.total) {
    throw std::runtime_error("devectorize: layout mismatch (flat length " +
                             std::to_string(snapshot.flat.size()) + " vs layout " +
                             std::to_string(snapshot.layout.total) + ")");
  }
  AdapterWeights w;
  w.scale = snapshot.layout.rank > 0 ? snapshot.layout.alpha / snapshot.layout.rank : 1.0;
  for (size_t i = 0; i + 1 < snapshot.layout.entries.size(); i += 2) {
    const LayoutEntry& la = snapshot.layout.entries[i];
    const LayoutEntry& lb = snapshot.layout.entries[i + 1];
    if (la.matrix != 'A' || lb.matrix != 'B' || la.point != lb.point) {
      throw std::runtime_error("devectorize: layout mismatch (A/B pairing)");
    }
    AdapterWeights::Entry e;
    e.point = la.point;
    e.a = Tensor::zeros({la.rows, la.cols}, true);
    e.b = Tensor::zeros({lb.rows, lb.cols}, true);
    if (la.offset + e.a.numel() > snapshot.flat.size() ||
        lb.offset + e.b.numel() > snapshot.flat.size()) {
      throw std::runtime_error("devectorize: layout mismatch (offsets)");
    }
    std::memcpy(e.a.data->data(), snapshot.flat.data() + la.offset,
                sizeof(double) * e.a.numel());
    std::memcpy(e.b.data->data(), snapshot.flat.data() + lb.offset,
                sizeof(double) * e.b.numel());
    w.entries.push_back(std::move(e));
  }
  if (w.entries.size() * 2 != snapshot.layout.entries.size()) {
    throw std::runtime_error("devectorize: layout mismatch (entry count)");
  }
  return w;
}

AdapterWeights devectorize(const AdapterSnapshot& snapshot, const AdapterConfig& cfg,
                           const BackboneModel& model) {
  const SnapshotLayout expected = layout_for(cfg, model);
  if (snapshot.flat.size() != expected.total || snapshot.layout.entries != expected.entries) {
    throw std::runtime_error("devectorize: snapshot layout does not match config");
  }
  AdapterWeights w = devectorize(snapshot);
  w.scale = cfg.scaling();
  return w;
}

std::vector<uint8_t> snapshot_bytes(const AdapterSnapshot& snapshot) {
  ByteWriter w;
  w.bytes_raw("COLA", 4);
  w.u16(1);  // format version
  w.str(snapshot.task_id);
  w.u32(static_cast<uint32_t>(snapshot.layout.entries.size()));
  for (const LayoutEntry& e : snapshot.layout.entries) {
    w.str(e.point + "/" + e.matrix);
    // r/d/k for the owning point; A is [r,k], B is [d,r].
    uint32_t r, d, k;
    if (e.matrix == 'A') {
      r = static_cast<uint32_t>(e.rows);
      k = static_cast<uint32_t>(e.cols);
      d = 0;
    } else {
      d = static_cast<uint32_t>(e.rows);
      r = static_cast<uint32_t>(e.cols);
      k = 0;
    }
    w.u32(r);
    w.u32(d);
    w.u32(k);
    w.u64(e.offset);
  }
  w.u32(static_cast<uint32_t>(snapshot.layout.rank));
  w.f64(snapshot.layout.alpha);
  for (double x : snapshot.flat) w.f32(static_cast<float>(x));
  return std::move(w).take();
}

AdapterSnapshot snapshot_from_bytes(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes_raw(magic, 4);
  if (std::memcmp(magic, "COLA", 4) != 0) {
    throw std::runtime_error("snapshot: bad magic");
  }
  const uint16_t version = r.u16();
  if (version != 1) throw std::runtime_error("snapshot: unsupported version");
  AdapterSnapshot s;
  s.task_id = r.str();
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    LayoutEntry e;
    std::string name = r.str();
    const size_t slash = name.rfind('/');
    if (slash == std::string::npos || slash + 2 != name.size()) {
      throw std::runtime_error("snapshot: bad layout entry name");
    }
    e.point = name.substr(0, slash);
    e.matrix = name.back();
    const uint32_t rr = r.u32(), dd = r.u32(), kk = r.u32();
    if (e.matrix == 'A') {
      e.rows = static_cast<int>(rr);
      e.cols = static_cast<int>(kk);
    } else if (e.matrix == 'B') {
      e.rows = static_cast<int>(dd);
      e.cols = static_cast<int>(rr);
    } else {
      throw std::runtime_error("snapshot: bad matrix tag");
    }
    e.offset = r.u64();
    s.layout.entries.push_back(std::move(e));
  }
  s.layout.rank = static_cast<int>(r.u32());
  s.layout.alpha = r.f64();
  uint64_t total = 0;
  for (const LayoutEntry& e : s.layout.entries) {
    total = std::max(total, e.offset + static_cast<uint64_t>(e.rows) * e.cols);
  }
  s.layout.total = total;
  s.flat.resize(total);
  for (uint64_t i = 0; i < total; ++i) s.flat[i] = static_cast<double>(r.f32());
  r.expect_end("snapshot");
  return s;
}

void save_snapshot(const AdapterSnapshot& snapshot, const std::string& path) {
  write_file(path, snapshot_bytes(snapshot));
}

AdapterSnapshot load_snapshot(const std::string& path) {
  return snapshot_from_bytes(read_file(path));
}

void write_layout(ByteWriter& w, const SnapshotLayout& layout) {
  w.u32(static_cast<uint32_t>(layout.rank));
  w.f64(layout.alpha);
  w.u64(layout.total);
  w.u32(static_cast<uint32_t>(layout.entries.size()));
  for (const LayoutEntry& e : layout.entries) {
    w.str(e.point);
    w.u8(static_cast<uint8_t>(e.matrix));
    w.u32(static_cast<uint32_t>(e.rows));
    w.u32(static_cast<uint32_t>(e.cols));
    w.u64(e.offset);
  }
}

SnapshotLayout read_layout(ByteReader& r) {
  SnapshotLayout layout;
  layout.rank = static_cast<int>(r.u32());
  layout.alpha = r.f64();
  layout.total = r.u64();
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    LayoutEntry e;
    e.point = r.str();
    e.matrix = static_cast<char>(r.u8());
    e.rows = static_cast<int>(r.u32());
    e.cols = static_cast<int>(r.u32());
    e.offset = r.u64();
    layout.entries.push_back(std::move(e));
  }
  return layout;
}

}  // namespace cola
