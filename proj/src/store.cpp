#include "cola/store.hpp"

#include <algorithm>
#include <cmath>

#include "cola/backbone.hpp"
#include "cola/serialize.hpp"

namespace cola {

FifoBuffer::FifoBuffer(size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::runtime_error("fifo: capacity must be positive");
}

bool FifoBuffer::contains(const std::string& task_id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const AdapterSnapshot& s) { return s.task_id == task_id; });
}

void FifoBuffer::push(AdapterSnapshot snapshot) {
  if (full()) throw std::runtime_error("fifo: buffer full");
  entries_.push_back(std::move(snapshot));
}

std::vector<AdapterSnapshot> FifoBuffer::drain() {
  std::vector<AdapterSnapshot> out = std::move(entries_);
  entries_.clear();
  return out;
}

size_t FifoBuffer::serialized_bytes() const {
  size_t n = 0;
  for (const AdapterSnapshot& s : entries_) n += snapshot_bytes(s).size();
  return n;
}

Memory::Memory(CaeModel cae, size_t buffer_capacity)
    : cae_(std::move(cae)), buffer_(buffer_capacity) {}

void Memory::submit(AdapterSnapshot snapshot) {
  if (finalized_) {
    throw std::runtime_error(
        "store: finalized; encoding requires a new training phase");
  }
  if (static_cast<int>(snapshot.flat.size()) != cae_.input_width) {
    throw std::runtime_error("store: snapshot width mismatch");
  }
  snapshot_bytes_[snapshot.task_id] = cola::snapshot_bytes(snapshot).size();
  buffer_.push(std::move(snapshot));
  max_buffer_bytes_ = std::max(max_buffer_bytes_, buffer_.serialized_bytes());
  if (buffer_.full()) flush();
}

void Memory::flush() {
  if (finalized_) throw std::runtime_error("store: finalized");
  if (buffer_.size() == 0) return;
  std::vector<AdapterSnapshot> candidate;
  if (cae_.cfg.retrain_from_decodes) {
    // Old members enter the joint objective as their current reconstructions.
    for (const auto& [id, code] : codes_) candidate.push_back(cae_.decode(code));
  } else {
    candidate = population_;
  }
  for (const AdapterSnapshot& s : buffer_.entries()) candidate.push_back(s);

  // Throws with the buffer intact so the caller can retry with more steps.
  train_cae(cae_, candidate, cae_.cfg.threshold, cae_.cfg.max_steps);

  std::map<std::string, LatentCode> refreshed;
  for (const AdapterSnapshot& s : candidate) {
    LatentCode code = cae_.encode(s);
    if (code.reconstruction_score < cae_.cfg.threshold) {
      throw std::runtime_error("store: encode below threshold for " + s.task_id);
    }
    refreshed[s.task_id] = std::move(code);
  }
  codes_ = std::move(refreshed);
  population_ = cae_.cfg.retrain_from_decodes ? std::vector<AdapterSnapshot>{}
                                              : std::move(candidate);
  buffer_.drain();  // raw buffer entries are gone for good
}

LatentStore Memory::finalize() {
  if (finalized_) throw std::runtime_error("store: already finalized");
  flush();
  LatentStore store;
  store.decoder = cae_.decoder.clone();
  store.decoder.set_requires_grad(false);
  store.mu = cae_.mu.detached_copy();
  store.sigma = cae_.sigma.detached_copy();
  store.layout = cae_.layout;
  store.latent_dim = cae_.cfg.latent_dim;
  store.input_width = cae_.input_width;
  store.codes = codes_;
  store.encoder_retained = false;
  population_.clear();
  population_.shrink_to_fit();
  cae_.encoder = Mlp();  // encoder discarded
  finalized_ = true;
  return store;
}

AdapterSnapshot fetch_adapter(const LatentStore& store, const std::string& task_id) {
  auto it = store.codes.find(task_id);
  if (it == store.codes.end()) {
    throw std::runtime_error("store: unknown task_id '" + task_id + "'");
  }
  const LatentCode& code = it->second;
  if (static_cast<int>(code.z.size()) != store.latent_dim) {
    throw std::runtime_error("store: latent width mismatch");
  }
  NoGradGuard ng;
  Tensor z = Tensor::from({1, store.latent_dim}, code.z);
  Tensor y = store.decoder.forward(z);
  AdapterSnapshot out;
  out.task_id = task_id;
  out.layout = store.layout;
  out.flat.resize(static_cast<size_t>(store.input_width));
  for (int i = 0; i < store.input_width; ++i) {
    out.flat[i] = (*y.data)[i] * (*store.sigma.data)[i] + (*store.mu.data)[i];
  }
  return out;
}

long break_even_tasks(size_t decoder_bytes, int input_width, int latent_dim) {
  if (latent_dim >= input_width) return -1;
  const double per_task_saving = 4.0 * (input_width - latent_dim);
  return static_cast<long>(std::floor(static_cast<double>(decoder_bytes) /
                                      per_task_saving)) + 1;
}

StorageReport storage_report(const LatentStore& store, size_t backbone_bytes,
                             const std::map<std::string, size_t>& adapter_bytes,
                             size_t buffer_bytes, const ReplayBaselineConfig& replay) {
  StorageReport r;
  r.n_tasks = store.codes.size();
  r.backbone_bytes = backbone_bytes;
  for (const auto& [id, bytes] : adapter_bytes) r.adapter_style_bytes += bytes;
  StoreSectionSizes sizes;
  store_bytes(store, &sizes);
  r.store_total_bytes = sizes.total;
  r.latents_bytes = sizes.codes > 4 ? sizes.codes - 4 : 0;  // net of the count field
  r.decoder_bytes = sizes.total - r.latents_bytes;
  r.buffer_bytes = buffer_bytes;
  r.replay_buffer_bytes = r.n_tasks * replay.examples_per_task * replay.bytes_per_example;
  r.per_task_decoder_reading_bytes = r.n_tasks * r.decoder_bytes;
  r.break_even_tasks = break_even_tasks(r.decoder_bytes, store.input_width,
                                        store.latent_dim);
  r.latent_dim = store.latent_dim;
  r.input_width = store.input_width;
  return r;
}

std::vector<uint8_t> store_bytes(const LatentStore& store, StoreSectionSizes* sizes) {
  std::vector<Section> sections;
  {
    ByteWriter w;
    write_mlp(w, store.decoder);
    sections.push_back({"DEC", std::move(w).take()});
  }
  {
    ByteWriter w;
    w.u64(static_cast<uint64_t>(store.input_width));
    for (double x : *store.mu.data) w.f32(static_cast<float>(x));
    for (double x : *store.sigma.data) w.f32(static_cast<float>(x));
    sections.push_back({"NRM", std::move(w).take()});
  }
  {
    ByteWriter w;
    write_layout(w, store.layout);
    w.u32(static_cast<uint32_t>(store.latent_dim));
    sections.push_back({"LAYOUT", std::move(w).take()});
  }
  {
    ByteWriter w;
    w.u32(static_cast<uint32_t>(store.codes.size()));
    for (const auto& [id, code] : store.codes) {
      w.str(id);
      w.u32(static_cast<uint32_t>(code.z.size()));
      for (double x : code.z) w.f32(static_cast<float>(x));
      w.f32(static_cast<float>(code.reconstruction_score));
    }
    sections.push_back({"CODES", std::move(w).take()});
  }
  if (sizes != nullptr) {
    sizes->dec = sections[0].payload.size();
    sizes->nrm = sections[1].payload.size();
    sizes->layout = sections[2].payload.size();
    sizes->codes = sections[3].payload.size();
  }
  std::vector<uint8_t> bytes = container_bytes(sections);
  if (sizes != nullptr) sizes->total = bytes.size();
  return bytes;
}

LatentStore store_from_bytes(const std::vector<uint8_t>& bytes) {
  std::vector<Section> sections = container_from_bytes(bytes);
  LatentStore store;
  {
    ByteReader r(find_section(sections, "DEC").payload);
    store.decoder = read_mlp(r);
  }
  {
    ByteReader r(find_section(sections, "NRM").payload);
    const uint64_t l = r.u64();
    store.input_width = static_cast<int>(l);
    store.mu = Tensor::zeros({1, store.input_width});
    store.sigma = Tensor::zeros({1, store.input_width});
    for (double& x : *store.mu.data) x = static_cast<double>(r.f32());
    for (double& x : *store.sigma.data) x = static_cast<double>(r.f32());
  }
  {
    ByteReader r(find_section(sections, "LAYOUT").payload);
    store.layout = read_layout(r);
    store.latent_dim = static_cast<int>(r.u32());
  }
  {
    ByteReader r(find_section(sections, "CODES").payload);
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      LatentCode code;
      code.task_id = r.str();
      const uint32_t m = r.u32();
      code.z.resize(m);
      for (double& x : code.z) x = static_cast<double>(r.f32());
      code.reconstruction_score = static_cast<double>(r.f32());
      store.codes[code.task_id] = std::move(code);
    }
  }
  store.encoder_retained = false;
  return store;
}

void save_store(const LatentStore& store, const std::string& path) {
  write_file(path, store_bytes(store));
}

LatentStore load_store(const std::string& path) {
  return store_from_bytes(read_file(path));
}

std::vector<uint8_t> backbone_bytes(const BackboneModel& model) {
  std::vector<Section> sections;
  {
    ByteWriter w;
    const BackboneConfig& c = model.cfg;
    w.u32(static_cast<uint32_t>(c.vocab_size));
    w.u32(static_cast<uint32_t>(c.embed_dim));
    w.u32(static_cast<uint32_t>(c.n_blocks));
    w.u32(static_cast<uint32_t>(c.n_heads));
    w.u32(static_cast<uint32_t>(c.ffn_mult));
    w.u32(static_cast<uint32_t>(c.max_seq));
    w.u32(static_cast<uint32_t>(c.n_classes));
    w.u8(model.frozen ? 1 : 0);
    sections.push_back({"META", std::move(w).take()});
  }
  {
    ByteWriter w;
    for (const Tensor& t : model.params()) {
      for (double x : *t.data) w.f32(static_cast<float>(x));
    }
    sections.push_back({"WTS", std::move(w).take()});
  }
  return container_bytes(sections);
}

BackboneModel backbone_from_bytes(const std::vector<uint8_t>& bytes) {
  std::vector<Section> sections = container_from_bytes(bytes);
  BackboneConfig cfg;
  bool frozen = false;
  {
    ByteReader r(find_section(sections, "META").payload);
    cfg.vocab_size = static_cast<int>(r.u32());
    cfg.embed_dim = static_cast<int>(r.u32());
    cfg.n_blocks = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.ffn_mult = static_cast<int>(r.u32());
    cfg.max_seq = static_cast<int>(r.u32());
    cfg.n_classes = static_cast<int>(r.u32());
    frozen = r.u8() != 0;
  }
  BackboneModel model = BackboneModel::init(cfg, 0);
  {
    ByteReader r(find_section(sections, "WTS").payload);
    for (Tensor t : model.params()) {
      for (double& x : *t.data) x = static_cast<double>(r.f32());
    }
    r.expect_end("backbone weights");
  }
  if (frozen) model.freeze();
  return model;
}

void save_backbone(const BackboneModel& model, const std::string& path) {
  write_file(path, backbone_bytes(model));
}

BackboneModel load_backbone(const std::string& path) {
  return backbone_from_bytes(read_file(path));
}

}  // namespace cola
