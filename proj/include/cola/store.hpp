#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cola/cae.hpp"
#include "cola/lora.hpp"

namespace cola {

class BackboneModel;

// Short-term holding area for snapshots awaiting encoding. Eviction is a
// whole-buffer flush in arrival order.
class FifoBuffer {
 public:
  explicit FifoBuffer(size_t capacity);

  size_t capacity() const { return capacity_; }
  size_t size() const { return entries_.size(); }
  bool full() const { return entries_.size() >= capacity_; }
  bool contains(const std::string& task_id) const;
  void push(AdapterSnapshot snapshot);
  std::vector<AdapterSnapshot> drain();
  const std::vector<AdapterSnapshot>& entries() const { return entries_; }
  size_t serialized_bytes() const;

 private:
  size_t capacity_;
  std::vector<AdapterSnapshot> entries_;
};

// What survives finalization: the decoder, normalization stats, the layout
// template, and the latent codes. The encoder is gone by construction.
struct LatentStore {
  Mlp decoder;
  Tensor mu, sigma;
  SnapshotLayout layout;
  int latent_dim = 0;
  int input_width = 0;
  std::map<std::string, LatentCode> codes;
  bool encoder_retained = false;

  bool empty() const { return codes.empty(); }
  size_t size() const { return codes.size(); }
};

// Long-term memory orchestrator: owns the buffer, the CAE, and the raw
// snapshots the CAE is still allowed to see. finalize() discards both the
// encoder and every raw snapshot.
class Memory {
 public:
  Memory(CaeModel cae, size_t buffer_capacity);

  // Appends to the buffer; a full buffer triggers train-on-everything-seen,
  // re-encoding of all population members, and a purge of raw buffer entries.
  // On a threshold failure the buffer is left intact for retry.
  void submit(AdapterSnapshot snapshot);
  void flush();

  LatentStore finalize();
  bool finalized() const { return finalized_; }

  const FifoBuffer& buffer() const { return buffer_; }
  const CaeModel& cae() const { return cae_; }
  const std::map<std::string, LatentCode>& codes() const { return codes_; }
  const std::vector<AdapterSnapshot>& population() const { return population_; }
  const std::map<std::string, size_t>& recorded_snapshot_bytes() const {
    return snapshot_bytes_;
  }
  size_t max_buffer_bytes() const { return max_buffer_bytes_; }

 private:
  CaeModel cae_;
  FifoBuffer buffer_;
  std::vector<AdapterSnapshot> population_;  // raw snapshots until finalization
  std::map<std::string, LatentCode> codes_;
  std::map<std::string, size_t> snapshot_bytes_;  // serialized size at submit time
  size_t max_buffer_bytes_ = 0;
  bool finalized_ = false;
};

// Decode one task's snapshot from the store (pure function of (decoder, z)).
AdapterSnapshot fetch_adapter(const LatentStore& store, const std::string& task_id);

struct StorageReport {
  size_t n_tasks = 0;
  size_t backbone_bytes = 0;        // Theta
  size_t adapter_style_bytes = 0;   // sum of serialized per-task adapters
  size_t decoder_bytes = 0;         // DEC+NRM+LAYOUT sections + container framing
  size_t latents_bytes = 0;         // CODES payload net of the count field
  size_t store_total_bytes = 0;     // full container
  size_t buffer_bytes = 0;
  size_t replay_buffer_bytes = 0;   // n_tasks * examples * serialized example size
  size_t per_task_decoder_reading_bytes = 0;  // n_tasks * decoder_bytes
  long break_even_tasks = -1;
  int latent_dim = 0;
  int input_width = 0;
};

// Smallest n with decoder_bytes + n*(4m) < n*(4L); -1 when m >= L.
long break_even_tasks(size_t decoder_bytes, int input_width, int latent_dim);

struct ReplayBaselineConfig {
  size_t examples_per_task = 0;
  size_t bytes_per_example = 0;
};

StorageReport storage_report(const LatentStore& store, size_t backbone_bytes,
                             const std::map<std::string, size_t>& adapter_bytes,
                             size_t buffer_bytes,
                             const ReplayBaselineConfig& replay = {});

// Store container: sections DEC, NRM, LAYOUT, CODES.
struct StoreSectionSizes {
  size_t dec = 0, nrm = 0, layout = 0, codes = 0, total = 0;
};
std::vector<uint8_t> store_bytes(const LatentStore& store,
                                 StoreSectionSizes* sizes = nullptr);
LatentStore store_from_bytes(const std::vector<uint8_t>& bytes);
void save_store(const LatentStore& store, const std::string& path);
LatentStore load_store(const std::string& path);

// Backbone persisted in the same container format (sections META, WTS).
std::vector<uint8_t> backbone_bytes(const BackboneModel& model);
BackboneModel backbone_from_bytes(const std::vector<uint8_t>& bytes);
void save_backbone(const BackboneModel& model, const std::string& path);
BackboneModel load_backbone(const std::string& path);

}  // namespace cola
