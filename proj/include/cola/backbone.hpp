#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cola/dataset.hpp"
#include "cola/tensor.hpp"

namespace cola {

struct AdapterWeights;  // lora.hpp

struct BackboneConfig {
  int vocab_size = 128;
  int embed_dim = 32;
  int n_blocks = 1;
  int n_heads = 2;
  int ffn_mult = 4;
  int max_seq = 16;
  int n_classes = 4;
  double init_std = 0.08;
  // pretraining
  int pretrain_steps = 2500;
  int batch_size = 16;
  double lr = 3e-3;
  double lm_weight = 1.0;
  // Kept low so the generic head stays soft: per-task adapters must be able
  // to re-map marker classes without fighting entrenched margins.
  double cls_weight = 0.25;
  uint64_t seed = 1;
};

struct InjectionPoint {
  std::string name;
  int in_dim = 0;   // k
  int out_dim = 0;  // d
};

struct AttnBlock {
  Tensor wq, wk, wv, wo;  // [d, d]
  Tensor w_ff1;           // [d, ffn_mult*d]
  Tensor w_ff2;           // [ffn_mult*d, d]
};

// Small decoder-only sequence model with a next-token head and a mean-pooled
// classification head. Query and value projections are the LoRA injection
// points. Once frozen, no weight may change for the model's lifetime.
class BackboneModel {
 public:
  BackboneConfig cfg;
  Tensor tok_emb;  // [V, d]
  Tensor pos_emb;  // [max_seq, d]
  std::vector<AttnBlock> blocks;
  Tensor w_lm;   // [d, V]
  Tensor w_cls;  // [d, C]
  bool frozen = false;

  static BackboneModel init(const BackboneConfig& cfg, uint64_t seed);

  std::vector<Tensor> params() const;
  size_t param_count() const;
  std::vector<InjectionPoint> injection_points() const;
  uint64_t weight_checksum() const;
  void freeze();
  void set_requires_grad(bool on);
  BackboneModel clone() const;  // deep copy (used by the vanilla baseline)
};

struct ForwardOut {
  Tensor lm_logits;   // [B*T, V], row b*T+t predicts token t+1 of sequence b
  Tensor cls_logits;  // [B, C]
  Tensor pooled;      // [B, d], mean-pooled final hidden states
};

// All sequences in a batch must share one length <= max_seq.
ForwardOut forward_batch(const BackboneModel& model, const AdapterWeights* adapter,
                         const std::vector<std::vector<int>>& seqs);
ForwardOut forward(const BackboneModel& model, const AdapterWeights* adapter,
                   const std::vector<int>& tokens);

// Joint next-token + classification loss over a batch of examples.
Tensor batch_loss(const BackboneModel& model, const AdapterWeights* adapter,
                  const std::vector<const Example*>& batch, double lm_weight,
                  double cls_weight);

// Trains every backbone weight on the corpus, then freezes. Errors if steps
// is zero, loss diverges, or the loss fails to drop by half.
BackboneModel pretrain(const TaskDataset& corpus, const BackboneConfig& cfg);

double classification_accuracy(const BackboneModel& model,
                               const AdapterWeights* adapter,
                               const std::vector<Example>& examples);
// Mean perplexity of the next-token head over a set of sequences.
double mean_lm_perplexity(const BackboneModel& model, const AdapterWeights* adapter,
                          const std::vector<Example>& examples);

}  // namespace cola
