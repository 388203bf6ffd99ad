#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cola/backbone.hpp"
#include "cola/cae.hpp"
#include "cola/dataset.hpp"
#include "cola/lora.hpp"
#include "cola/store.hpp"

namespace cola {

// Synthetic task family: each task owns a contiguous vocabulary slice whose
// trailing tokens act as class markers. An example is band noise plus a few
// copies of one class marker; the label is that marker's class. Disjoint
// slices make tasks separable; shared slices/markers make pairs related.
struct TaskFamilyParams {
  int n_classes = 4;
  int markers_per_class = 1;
  int seq_len = 12;
  int marker_copies = 2;
  int train_n = 500;
  int valid_n = 100;
  int test_n = 100;
};

struct StreamConfig {
  int n_tasks = 10;
  uint64_t seed = 42;
  TaskFamilyParams family;
  BackboneConfig backbone;
  AdapterConfig adapter;
  CaeConfig cae;
  int buffer_capacity = 1;
  double vanilla_lr = 2e-3;
  bool run_vanilla = true;
  bool run_adapter_style = true;
  bool run_sweep = true;
  int n_orders = 1;
  int selection_threads = 1;
  int warm_start_sample = 32;
  std::vector<int> task_order;  // empty = natural order
};

// K mutually separable tasks over disjoint vocabulary slices.
std::vector<TaskDataset> generate_stream(const StreamConfig& config);

// Generic corpus covering the whole vocabulary with randomly placed windows,
// so the frozen backbone is marker-sensitive but tied to no task.
TaskDataset generate_pretrain_corpus(const BackboneConfig& cfg,
                                     const TaskFamilyParams& family, uint64_t seed,
                                     int n_train = 5000, int n_valid = 500);

// A pair of tasks for the transfer probe; related pairs share the background
// band and half the markers (same classes), unrelated pairs share nothing.
std::pair<TaskDataset, TaskDataset> generate_transfer_pair(const StreamConfig& config,
                                                           uint64_t seed, bool related);

// Softmax probe trained on frozen mean-pooled features; the independent
// reference for what is linearly separable without any adapter.
double probe_accuracy(const BackboneModel& model,
                      const std::vector<Example>& train_examples,
                      const std::vector<Example>& eval_examples, uint64_t seed,
                      int steps = 300, double lr = 0.05);

double spearman_rank_correlation(const std::vector<double>& x,
                                 const std::vector<double>& y);

struct SweepRow {
  double score = 0.0;    // mean reconstruction score at this checkpoint
  double min_score = 0.0;
  double avg_acc = 0.0;  // id-given accuracy of decoded adapters, averaged
};

struct TaskResult {
  std::string task_id;
  double post_train_acc = 0.0;      // original adapter, right after training
  double final_id_given_acc = 0.0;  // decoded adapter, task id provided
  double final_routed_acc = 0.0;    // decoded adapter chosen by perplexity
  double routing_acc = 0.0;         // fraction of test inputs routed home
  double forgetting = 0.0;          // post_train_acc - final_routed_acc
  double recon_score = 0.0;
};

struct RunReport {
  uint64_t seed = 0;
  std::vector<std::string> task_order;
  std::vector<TaskResult> per_task;
  // acc[i][j]: accuracy on task j after learning task i (-1 when j > i).
  std::vector<std::vector<double>> acc_matrix;
  std::vector<std::vector<double>> vanilla_matrix;
  double baseline_avg_acc = 0.0;  // original adapters, id given
  double avg_final_acc_cola = 0.0;
  double avg_final_acc_vanilla = -1.0;
  double avg_final_acc_adapter_style = -1.0;
  double avg_forgetting_cola = 0.0;
  double avg_forgetting_vanilla = -1.0;
  double routing_accuracy = 0.0;
  std::vector<SweepRow> sweep;
  double sweep_spearman = 0.0;
  StorageReport storage;
  bool no_rehearsal_audit_passed = false;
  bool checksum_ok = false;
  uint64_t backbone_checksum = 0;
  std::map<std::string, double> timing_seconds;  // excluded from determinism
};

// Full lifecycle against a frozen backbone: adapt+compress per task, finalize,
// route-evaluate, then the vanilla and adapter-style baselines on identical
// regenerated streams.
RunReport run_cola(const BackboneModel& model, const StreamConfig& config,
                   LatentStore* store_out = nullptr);

struct MultiRunReport {
  std::vector<RunReport> per_order;
  double mean_avg_final_acc_cola = 0.0;
  double mean_avg_final_acc_vanilla = -1.0;
  double mean_routing_accuracy = 0.0;
};
MultiRunReport run_cola_multi(const BackboneModel& model, const StreamConfig& config);

struct TransferArm {
  std::vector<std::pair<int, double>> curve;  // (step, valid accuracy)
  double final_acc = 0.0;
  int steps_to_threshold = -1;  // -1 = never reached
};

struct TransferSeedResult {
  uint64_t seed = 0;
  std::string donor;
  double threshold = 0.0;  // 90% of the scratch arm's final accuracy
  TransferArm scratch;
  TransferArm warm;
  bool warm_strictly_faster = false;
};

struct TransferReport {
  std::vector<TransferSeedResult> related;
  std::vector<TransferSeedResult> unrelated;
};

TransferReport run_transfer_probe(const BackboneModel& model, const StreamConfig& config,
                                  int n_seeds = 5);

struct SweepReport {
  std::vector<SweepRow> rows;
  double spearman = 0.0;
  double baseline_avg_acc = 0.0;
};

// Standalone fidelity sweep: trains fresh adapters, then a fresh CAE with
// checkpoints captured as the mean reconstruction score crosses milestones.
SweepReport run_fidelity_sweep(const BackboneModel& model, const StreamConfig& config);

// JSON/CSV emission. Metrics-only JSON is byte-comparable across runs.
std::string report_json(const RunReport& report, bool metrics_only);
std::string transfer_report_json(const TransferReport& report);
void write_report_files(const RunReport& report, const std::string& out_dir);
void write_transfer_files(const TransferReport& report, const std::string& out_dir);

size_t serialized_example_bytes(const Example& e);

}  // namespace cola
