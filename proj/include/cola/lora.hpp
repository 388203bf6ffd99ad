#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cola/backbone.hpp"
#include "cola/dataset.hpp"
#include "cola/tensor.hpp"

namespace cola {

struct AdapterConfig {
  int rank = 2;
  std::vector<std::string> points;  // empty = every injection point of the model
  double alpha = 2.0;               // effective scaling is alpha / rank
  double lr = 4e-3;
  int steps = 500;
  int batch_size = 16;
  double lm_weight = 1.0;
  double cls_weight = 1.0;
  int eval_every = 0;  // >0 records a validation-accuracy curve
  uint64_t seed = 0;

  double scaling() const { return alpha / rank; }
};

// Low-rank factors per injection point: delta(x) = (alpha/r) * x A^T B^T.
struct AdapterWeights {
  struct Entry {
    std::string point;
    Tensor a;  // [r, k]
    Tensor b;  // [d, r]
  };
  std::vector<Entry> entries;
  double scale = 1.0;

  const Entry* find(const std::string& point) const;
  std::vector<Tensor> params() const;
  size_t param_count() const;
};

struct LayoutEntry {
  std::string point;
  char matrix = 'A';  // 'A' [r,k] or 'B' [d,r]
  int rows = 0;
  int cols = 0;
  uint64_t offset = 0;

  bool operator==(const LayoutEntry&) const = default;
};

struct SnapshotLayout {
  std::vector<LayoutEntry> entries;
  uint64_t total = 0;  // L
  int rank = 0;
  double alpha = 0.0;

  bool operator==(const SnapshotLayout&) const = default;
};

// Flattened adapter vec[A;B] per injection point, fixed width L for one config.
struct AdapterSnapshot {
  std::string task_id;
  std::vector<double> flat;
  SnapshotLayout layout;
};

struct TaskMetrics {
  double final_val_accuracy = 0.0;
  double initial_val_accuracy = 0.0;
  std::vector<double> loss_curve;
  std::vector<std::pair<int, double>> val_curve;  // (step, accuracy)
};

SnapshotLayout layout_for(const AdapterConfig& cfg, const BackboneModel& model);

// Fresh adapters start as an exact zero delta (A random, B zero); a warm start
// restores the given snapshot bit-for-bit.
AdapterWeights init_adapter(const AdapterConfig& cfg, const BackboneModel& model,
                            const AdapterSnapshot* warm_start = nullptr);

// Fits A/B on one task with the backbone frozen. The dataset handle stays
// with the caller, which is responsible for destroying it afterwards.
TaskMetrics train_task(const BackboneModel& model, AdapterWeights& adapter,
                       const TaskDataset& data, const AdapterConfig& cfg);

AdapterSnapshot vectorize(const AdapterWeights& adapter, const std::string& task_id);
AdapterWeights devectorize(const AdapterSnapshot& snapshot, const AdapterConfig& cfg,
                           const BackboneModel& model);
// Re-inflate against a stored layout (no model needed; shapes come from it).
AdapterWeights devectorize(const AdapterSnapshot& snapshot);

// Snapshot container: magic "COLA", version, task id, layout table, f32 payload.
std::vector<uint8_t> snapshot_bytes(const AdapterSnapshot& snapshot);
AdapterSnapshot snapshot_from_bytes(const std::vector<uint8_t>& bytes);
void save_snapshot(const AdapterSnapshot& snapshot, const std::string& path);
AdapterSnapshot load_snapshot(const std::string& path);

class ByteWriter;
class ByteReader;
void write_layout(ByteWriter& w, const SnapshotLayout& layout);
SnapshotLayout read_layout(ByteReader& r);

}  // namespace cola
