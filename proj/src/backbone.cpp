#include "cola/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "cola/lora.hpp"
#include "cola/nn.hpp"
#include "cola/ops.hpp"

namespace cola {

BackboneModel BackboneModel::init(const BackboneConfig& cfg, uint64_t seed) {
  if (cfg.vocab_size <= 0 || cfg.embed_dim <= 0 || cfg.n_blocks < 0 ||
      cfg.n_heads <= 0 || cfg.embed_dim % cfg.n_heads != 0) {
    throw std::runtime_error("backbone: bad config");
  }
  Rng rng(seed);
  BackboneModel m;
  m.cfg = cfg;
  const int d = cfg.embed_dim;
  Rng er = rng.child("emb");
  m.tok_emb = Tensor::randn({cfg.vocab_size, d}, er, cfg.init_std, true);
  Rng pr = rng.child("pos");
  m.pos_emb = Tensor::randn({cfg.max_seq, d}, pr, cfg.init_std, true);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    AttnBlock blk;
    Rng br = rng.child("block", b);
    Rng q = br.child("q"), k = br.child("k"), v = br.child("v"), o = br.child("o");
    Rng f1 = br.child("ff1"), f2 = br.child("ff2");
    blk.wq = Tensor::randn({d, d}, q, cfg.init_std, true);
    blk.wk = Tensor::randn({d, d}, k, cfg.init_std, true);
    blk.wv = Tensor::randn({d, d}, v, cfg.init_std, true);
    blk.wo = Tensor::randn({d, d}, o, cfg.init_std, true);
    blk.w_ff1 = Tensor::randn({d, cfg.ffn_mult * d}, f1, cfg.init_std, true);
    blk.w_ff2 = Tensor::randn({cfg.ffn_mult * d, d}, f2, cfg.init_std, true);
    m.blocks.push_back(std::move(blk));
  }
  Rng lm = rng.child("lm"), cl = rng.child("cls");
  m.w_lm = Tensor::randn({d, cfg.vocab_size}, lm, cfg.init_std, true);
  m.w_cls = Tensor::randn({d, cfg.n_classes}, cl, cfg.init_std, true);
  return m;
}

std::vector<Tensor> BackboneModel::params() const {
  std::vector<Tensor> out{tok_emb, pos_emb};
  for (const AttnBlock& b : blocks) {
    out.push_back(b.wq);
    out.push_back(b.wk);
    out.push_back(b.wv);
    out.push_back(b.wo);
    out.push_back(b.w_ff1);
    out.push_back(b.w_ff2);
  }
  out.push_back(w_lm);
  out.push_back(w_cls);
  return out;
}

size_t BackboneModel::param_count() const {
  size_t n = 0;
  for (const Tensor& t : params()) n += t.numel();
  return n;
}

std::vector<InjectionPoint> BackboneModel::injection_points() const {
  std::vector<InjectionPoint> pts;
  for (size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "blk" + std::to_string(b);
    pts.push_back({prefix + ".q", cfg.embed_dim, cfg.embed_dim});
    pts.push_back({prefix + ".v", cfg.embed_dim, cfg.embed_dim});
  }
  return pts;
}

uint64_t BackboneModel::weight_checksum() const { return checksum(params()); }

void BackboneModel::freeze() {
  set_requires_grad(false);
  frozen = true;
}

void BackboneModel::set_requires_grad(bool on) {
  tok_emb.set_trainable(on);
  pos_emb.set_trainable(on);
  for (AttnBlock& b : blocks) {
    b.wq.set_trainable(on);
    b.wk.set_trainable(on);
    b.wv.set_trainable(on);
    b.wo.set_trainable(on);
    b.w_ff1.set_trainable(on);
    b.w_ff2.set_trainable(on);
  }
  w_lm.set_trainable(on);
  w_cls.set_trainable(on);
}

BackboneModel BackboneModel::clone() const {
  BackboneModel m;
  m.cfg = cfg;
  m.frozen = frozen;
  auto cp = [](const Tensor& t) {
    Tensor c = t.detached_copy();
    c.set_trainable(t.requires_grad);
    return c;
  };
  m.tok_emb = cp(tok_emb);
  m.pos_emb = cp(pos_emb);
  for (const AttnBlock& b : blocks) {
    AttnBlock nb;
    nb.wq = cp(b.wq);
    nb.wk = cp(b.wk);
    nb.wv = cp(b.wv);
    nb.wo = cp(b.wo);
    nb.w_ff1 = cp(b.w_ff1);
    nb.w_ff2 = cp(b.w_ff2);
    m.blocks.push_back(std::move(nb));
  }
  m.w_lm = cp(w_lm);
  m.w_cls = cp(w_cls);
  return m;
}

namespace {

// x W plus the low-rank delta when this point is adapted: (alpha/r) x A^T B^T.
Tensor project(const Tensor& x, const Tensor& w, const AdapterWeights* adapter,
               const std::string& point) {
  Tensor base = matmul(x, w);
  if (adapter == nullptr) return base;
  const AdapterWeights::Entry* e = adapter->find(point);
  if (e == nullptr) return base;
  if (e->a.cols() != w.rows() || e->b.rows() != w.cols() ||
      e->a.rows() != e->b.cols()) {
    throw std::runtime_error("adapter: shape incompatible with model at " + point);
  }
  Tensor delta = matmul(matmul(x, e->a, false, true), e->b, false, true);
  return add(base, scale(delta, adapter->scale));
}

}  // namespace

ForwardOut forward_batch(const BackboneModel& model, const AdapterWeights* adapter,
                         const std::vector<std::vector<int>>& seqs) {
  if (seqs.empty()) throw std::runtime_error("forward: empty batch");
  const int t = static_cast<int>(seqs[0].size());
  if (t < 1 || t > model.cfg.max_seq) {
    throw std::runtime_error("forward: sequence length out of range");
  }
  const int bsz = static_cast<int>(seqs.size());
  std::vector<int> flat_ids;
  std::vector<int> pos_ids;
  flat_ids.reserve(static_cast<size_t>(bsz) * t);
  pos_ids.reserve(static_cast<size_t>(bsz) * t);
  for (const auto& s : seqs) {
    if (static_cast<int>(s.size()) != t) {
      throw std::runtime_error("forward: ragged batch");
    }
    for (int tok : s) {
      if (tok < 0 || tok >= model.cfg.vocab_size) {
        throw std::runtime_error("forward: token out of vocabulary");
      }
      flat_ids.push_back(tok);
    }
    for (int p = 0; p < t; ++p) pos_ids.push_back(p);
  }

  const int d = model.cfg.embed_dim;
  const int nh = model.cfg.n_heads;
  const int hd = d / nh;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor x = add(gather_rows(model.tok_emb, flat_ids),
                 gather_rows(model.pos_emb, pos_ids));
  for (size_t bi = 0; bi < model.blocks.size(); ++bi) {
    const AttnBlock& blk = model.blocks[bi];
    const std::string prefix = "blk" + std::to_string(bi);
    Tensor xn = rmsnorm_rows(x);
    Tensor q = project(xn, blk.wq, adapter, prefix + ".q");
    Tensor k = matmul(xn, blk.wk);
    Tensor v = project(xn, blk.wv, adapter, prefix + ".v");
    std::vector<Tensor> seq_outs;
    seq_outs.reserve(bsz);
    for (int b = 0; b < bsz; ++b) {
      Tensor qb = slice_rows(q, b * t, t);
      Tensor kb = slice_rows(k, b * t, t);
      Tensor vb = slice_rows(v, b * t, t);
      std::vector<Tensor> head_outs;
      head_outs.reserve(nh);
      for (int h = 0; h < nh; ++h) {
        Tensor qh = slice_cols(qb, h * hd, hd);
        Tensor kh = slice_cols(kb, h * hd, hd);
        Tensor vh = slice_cols(vb, h * hd, hd);
        Tensor scores = scale(matmul(qh, kh, false, true), inv_sqrt_hd);
        Tensor probs = causal_row_softmax(scores);
        head_outs.push_back(matmul(probs, vh));
      }
      seq_outs.push_back(nh == 1 ? head_outs[0] : concat_cols(head_outs));
    }
    Tensor attn = bsz == 1 ? seq_outs[0] : concat_rows(seq_outs);
    x = add(x, matmul(attn, blk.wo));
    Tensor fn = rmsnorm_rows(x);
    Tensor ff = matmul(relu_t(matmul(fn, blk.w_ff1)), blk.w_ff2);
    x = add(x, ff);
  }
  Tensor xf = rmsnorm_rows(x);
  ForwardOut out;
  out.lm_logits = matmul(xf, model.w_lm);
  out.pooled = row_mean_blocks(xf, t);
  out.cls_logits = matmul(out.pooled, model.w_cls);
  return out;
}

ForwardOut forward(const BackboneModel& model, const AdapterWeights* adapter,
                   const std::vector<int>& tokens) {
  return forward_batch(model, adapter, {tokens});
}

Tensor batch_loss(const BackboneModel& model, const AdapterWeights* adapter,
                  const std::vector<const Example*>& batch, double lm_weight,
                  double cls_weight) {
  if (batch.empty()) throw std::runtime_error("batch_loss: empty batch");
  std::vector<std::vector<int>> seqs;
  std::vector<int> cls_labels;
  seqs.reserve(batch.size());
  for (const Example* e : batch) {
    seqs.push_back(e->tokens);
    cls_labels.push_back(e->label);
  }
  const int t = static_cast<int>(seqs[0].size());
  ForwardOut out = forward_batch(model, adapter, seqs);
  Tensor loss = scale(softmax_xent(out.cls_logits, cls_labels), cls_weight);
  if (lm_weight != 0.0 && t >= 2) {
    std::vector<int> sel;
    std::vector<int> next_tokens;
    for (size_t b = 0; b < seqs.size(); ++b) {
      for (int p = 0; p + 1 < t; ++p) {
        sel.push_back(static_cast<int>(b) * t + p);
        next_tokens.push_back(seqs[b][p + 1]);
      }
    }
    Tensor lm = softmax_xent(gather_rows(out.lm_logits, sel), next_tokens);
    loss = add(loss, scale(lm, lm_weight));
  }
  return loss;
}

BackboneModel pretrain(const TaskDataset& corpus, const BackboneConfig& cfg) {
  if (corpus.train().empty()) throw std::runtime_error("pretrain: corpus empty");
  if (cfg.pretrain_steps <= 0) {
    throw std::runtime_error("pretrain: refusing to freeze an untrained backbone (steps == 0)");
  }
  BackboneModel model = BackboneModel::init(cfg, cfg.seed);
  Adam opt(model.params(), cfg.lr);
  Rng batch_rng = Rng(cfg.seed).child("pretrain-batches");
  const auto& train = corpus.train();
  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(train.size()));

  double initial_loss = 0.0;
  double last_window = 0.0;
  int window_n = 0;
  const int window = std::min(20, cfg.pretrain_steps);
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    std::vector<const Example*> batch;
    batch.reserve(bsz);
    for (int i = 0; i < bsz; ++i) {
      batch.push_back(&train[batch_rng.uniform_int(static_cast<int>(train.size()))]);
    }
    Tensor loss = batch_loss(model, nullptr, batch, cfg.lm_weight, cfg.cls_weight);
    const double lval = loss.scalar();
    if (!std::isfinite(lval)) throw std::runtime_error("pretrain: loss diverged");
    if (step == 0) initial_loss = lval;
    if (step >= cfg.pretrain_steps - window) {
      last_window += lval;
      ++window_n;
    }
    backward(loss);
    opt.step();
  }
  const double final_loss = last_window / std::max(1, window_n);
  if (final_loss > 0.5 * initial_loss) {
    throw std::runtime_error("pretrain: insufficient loss decrease (" +
                             std::to_string(initial_loss) + " -> " +
                             std::to_string(final_loss) + ")");
  }
  model.freeze();
  return model;
}

double classification_accuracy(const BackboneModel& model,
                               const AdapterWeights* adapter,
                               const std::vector<Example>& examples) {
  if (examples.empty()) throw std::runtime_error("accuracy: no examples");
  NoGradGuard ng;
  int correct = 0;
  for (const Example& e : examples) {
    ForwardOut out = forward(model, adapter, e.tokens);
    const int c = model.cfg.n_classes;
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (out.cls_logits.at(0, j) > out.cls_logits.at(0, best)) best = j;
    }
    if (best == e.label) ++correct;
  }
  return static_cast<double>(correct) / examples.size();
}

double mean_lm_perplexity(const BackboneModel& model, const AdapterWeights* adapter,
                          const std::vector<Example>& examples) {
  if (examples.empty()) throw std::runtime_error("perplexity: no examples");
  NoGradGuard ng;
  double total = 0.0;
  size_t n = 0;
  for (const Example& e : examples) {
    const int t = static_cast<int>(e.tokens.size());
    if (t < 2) continue;
    ForwardOut out = forward(model, adapter, e.tokens);
    double nll = 0.0;
    for (int p = 0; p + 1 < t; ++p) {
      std::vector<double> probs =
          softmax_row(out.lm_logits.data->data() + static_cast<size_t>(p) * model.cfg.vocab_size,
                      model.cfg.vocab_size);
      nll -= std::log(probs[e.tokens[p + 1]]);
    }
    total += std::exp(nll / (t - 1));
    ++n;
  }
  if (n == 0) throw std::runtime_error("perplexity: all sequences too short");
  return total / static_cast<double>(n);
}

}  // namespace cola
