#pragma once

#include "cola/harness.hpp"

namespace cola::testing {

// Desk-small configuration used across test binaries: quick to pretrain but
// large enough that adapters, routing and the autoencoder behave normally.
inline StreamConfig small_config() {
  StreamConfig c;
  c.seed = 2024;
  c.n_tasks = 4;
  c.backbone.vocab_size = 64;
  c.backbone.embed_dim = 16;
  c.backbone.n_blocks = 1;
  c.backbone.n_heads = 2;
  c.backbone.max_seq = 12;
  c.backbone.n_classes = 4;
  c.backbone.pretrain_steps = 800;
  c.backbone.batch_size = 16;
  c.backbone.lr = 3e-3;
  c.backbone.seed = 11;
  c.family.seq_len = 10;
  c.family.train_n = 240;
  c.family.valid_n = 80;
  c.family.test_n = 80;
  c.adapter.rank = 2;
  c.adapter.alpha = 2.0;
  c.adapter.lr = 2e-2;
  c.adapter.steps = 250;
  c.adapter.batch_size = 16;
  c.cae.latent_dim = 8;
  c.cae.hidden = 96;
  c.cae.lr = 3e-3;
  c.cae.max_steps = 8000;
  c.cae.batch_size = 8;
  c.cae.seed = 5;
  c.run_sweep = false;
  c.run_vanilla = false;
  c.run_adapter_style = false;
  return c;
}

// Shared frozen backbone; pretrained once per test binary.
inline const BackboneModel& small_backbone() {
  static BackboneModel model = [] {
    StreamConfig c = small_config();
    TaskDataset corpus = generate_pretrain_corpus(c.backbone, c.family, c.backbone.seed,
                                                  2000, 300);
    return pretrain(corpus, c.backbone);
  }();
  return model;
}

}  // namespace cola::testing
