#include "cola/cae.hpp"

#include <algorithm>
#include <cmath>

#include "cola/ops.hpp"
#include "cola/serialize.hpp"

namespace cola {

namespace {

Tensor row_tensor(const std::vector<double>& v) {
  return Tensor::from({1, static_cast<int>(v.size())}, v);
}

double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double cosine_plain(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw std::runtime_error("cae: zero-norm snapshot");
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

CaeModel CaeModel::create(int input_width, const SnapshotLayout& layout,
                          const CaeConfig& cfg) {
  if (input_width <= 0) throw std::runtime_error("cae: bad input width");
  if (cfg.latent_dim <= 0 || cfg.latent_dim > input_width / 4) {
    throw std::runtime_error("cae: latent dim must satisfy m <= L/4 (m=" +
                             std::to_string(cfg.latent_dim) + ", L=" +
                             std::to_string(input_width) + ")");
  }
  if (cfg.lambda <= 0.0) throw std::runtime_error("cae: lambda must be positive");
  CaeModel m;
  m.cfg = cfg;
  m.input_width = input_width;
  m.layout = layout;
  Rng rng(cfg.seed);
  Rng er = rng.child("encoder"), dr = rng.child("decoder");
  m.encoder = Mlp::create({input_width, cfg.hidden, cfg.latent_dim},
                          {Act::Tanh, Act::Linear}, er);
  m.decoder = Mlp::create({cfg.latent_dim, cfg.hidden, input_width},
                          {Act::Tanh, Act::Linear}, dr);
  m.mu = Tensor::zeros({1, input_width});
  m.sigma = Tensor::full({1, input_width}, 1.0);
  return m;
}

void CaeModel::refresh_normalization(const std::vector<AdapterSnapshot>& population) {
  if (population.empty()) throw std::runtime_error("cae: empty population");
  const size_t l = static_cast<size_t>(input_width);
  std::vector<double> mean(l, 0.0), var(l, 0.0);
  for (const AdapterSnapshot& s : population) {
    if (s.flat.size() != l) throw std::runtime_error("cae: width mismatch in population");
    for (size_t i = 0; i < l; ++i) mean[i] += s.flat[i];
  }
  for (double& x : mean) x /= static_cast<double>(population.size());
  for (const AdapterSnapshot& s : population) {
    for (size_t i = 0; i < l; ++i) {
      const double d = s.flat[i] - mean[i];
      var[i] += d * d;
    }
  }
  for (size_t i = 0; i < l; ++i) {
    const double std = std::sqrt(var[i] / static_cast<double>(population.size()));
    (*mu.data)[i] = mean[i];
    (*sigma.data)[i] = std < 1e-12 ? 1.0 : std;
  }
}

static std::vector<double> normalize_input(const CaeModel& m, const std::vector<double>& flat) {
  std::vector<double> out(flat.size());
  for (size_t i = 0; i < flat.size(); ++i) {
    out[i] = (flat[i] - (*m.mu.data)[i]) / (*m.sigma.data)[i];
  }
  return out;
}

LatentCode CaeModel::encode(const AdapterSnapshot& snapshot) const {
  if (static_cast<int>(snapshot.flat.size()) != input_width) {
    throw std::runtime_error("cae encode: width mismatch (got " +
                             std::to_string(snapshot.flat.size()) + ", expect " +
                             std::to_string(input_width) + ")");
  }
  NoGradGuard ng;
  Tensor x = row_tensor(normalize_input(*this, snapshot.flat));
  Tensor z = encoder.forward(x);
  LatentCode code;
  code.task_id = snapshot.task_id;
  code.z.assign(z.data->begin(), z.data->end());
  AdapterSnapshot recon = decode(code);
  code.reconstruction_score = cosine_plain(snapshot.flat, recon.flat);
  return code;
}

AdapterSnapshot CaeModel::decode(const LatentCode& code) const {
  if (static_cast<int>(code.z.size()) != cfg.latent_dim) {
    throw std::runtime_error("cae decode: latent width mismatch");
  }
  NoGradGuard ng;
  Tensor z = row_tensor(code.z);
  Tensor y = decoder.forward(z);
  AdapterSnapshot out;
  out.task_id = code.task_id;
  out.layout = layout;
  out.flat.resize(static_cast<size_t>(input_width));
  for (int i = 0; i < input_width; ++i) {
    out.flat[i] = (*y.data)[i] * (*sigma.data)[i] + (*mu.data)[i];
  }
  return out;
}

double CaeModel::reconstruction_score(const AdapterSnapshot& snapshot) const {
  return encode(snapshot).reconstruction_score;
}

CaeModel CaeModel::clone() const {
  CaeModel m;
  m.encoder = encoder.clone();
  m.decoder = decoder.clone();
  m.mu = mu.detached_copy();
  m.sigma = sigma.detached_copy();
  m.layout = layout;
  m.cfg = cfg;
  m.input_width = input_width;
  return m;
}

Tensor contractive_penalty_t(const CaeModel& model, const Tensor& x_row) {
  return jacobian_penalty(model.encoder, x_row);
}

double contractive_penalty(const CaeModel& model, const std::vector<double>& input) {
  if (static_cast<int>(input.size()) != model.encoder.in_width()) {
    throw std::runtime_error("contractive_penalty: width mismatch");
  }
  NoGradGuard ng;
  return contractive_penalty_t(model, row_tensor(input)).scalar();
}

Tensor cae_loss_t(const CaeModel& model, const std::vector<const AdapterSnapshot*>& batch,
                  double lambda) {
  if (batch.empty()) throw std::runtime_error("cae_loss: empty batch");
  Tensor total = Tensor::zeros({1});
  const Tensor one = Tensor::full({1}, 1.0);
  for (const AdapterSnapshot* s : batch) {
    if (static_cast<int>(s->flat.size()) != model.input_width) {
      throw std::runtime_error("cae_loss: width mismatch");
    }
    if (vec_norm(s->flat) == 0.0) {
      throw std::runtime_error("cae_loss: zero-norm snapshot in batch");
    }
    Tensor x_raw = row_tensor(s->flat);
    Tensor x_norm = row_tensor(normalize_input(model, s->flat));
    Tensor recon_norm = model.decoder.forward(model.encoder.forward(x_norm));
    Tensor recon_raw = add(mul(recon_norm, model.sigma), model.mu);
    Tensor term = sub(one, cosine_similarity(x_raw, recon_raw));
    if (lambda != 0.0) {
      term = add(term, scale(contractive_penalty_t(model, x_norm), lambda));
    }
    total = add(total, term);
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double cae_loss(const CaeModel& model, const std::vector<AdapterSnapshot>& batch) {
  NoGradGuard ng;
  std::vector<const AdapterSnapshot*> ptrs;
  ptrs.reserve(batch.size());
  for (const AdapterSnapshot& s : batch) ptrs.push_back(&s);
  return cae_loss_t(model, ptrs, model.cfg.lambda).scalar();
}

namespace {

// Training objective: Eq.-style batch loss plus a scale anchor that pins the
// decoder's output norm to the target's in normalized space. The anchor has
// no effect on the reconstruction direction, only its magnitude.
struct TrainLoss {
  Tensor total;
  double recon_part = 0.0;  // the plain cosine+penalty value, for curves
};

TrainLoss train_objective(const CaeModel& model,
                          const std::vector<const AdapterSnapshot*>& batch,
                          double lambda, double anchor_weight) {
  TrainLoss out;
  Tensor total = Tensor::zeros({1});
  const Tensor one = Tensor::full({1}, 1.0);
  double recon_value = 0.0;
  for (const AdapterSnapshot* s : batch) {
    if (vec_norm(s->flat) == 0.0) {
      throw std::runtime_error("cae_loss: zero-norm snapshot in batch");
    }
    Tensor x_raw = row_tensor(s->flat);
    std::vector<double> norm = normalize_input(model, s->flat);
    Tensor x_norm = row_tensor(norm);
    Tensor recon_norm = model.decoder.forward(model.encoder.forward(x_norm));
    Tensor recon_raw = add(mul(recon_norm, model.sigma), model.mu);
    Tensor term = sub(one, cosine_similarity(x_raw, recon_raw));
    if (lambda != 0.0) {
      term = add(term, scale(contractive_penalty_t(model, x_norm), lambda));
    }
    recon_value += term.scalar();
    if (anchor_weight != 0.0) {
      double target_sq = 0.0;
      for (double v : norm) target_sq += v * v;
      Tensor ratio = scale(sum_sq(recon_norm), 1.0 / std::max(target_sq, 1e-12));
      Tensor anchor = mul(sub(ratio, one), sub(ratio, one));
      term = add(term, scale(anchor, anchor_weight));
    }
    total = add(total, term);
  }
  out.total = scale(total, 1.0 / static_cast<double>(batch.size()));
  out.recon_part = recon_value / static_cast<double>(batch.size());
  return out;
}

struct Scores {
  double min = 0.0;
  double mean = 0.0;
};

Scores population_scores(const CaeModel& model,
                         const std::vector<AdapterSnapshot>& population) {
  Scores s;
  s.min = 2.0;
  double sum = 0.0;
  for (const AdapterSnapshot& snap : population) {
    const double score = model.reconstruction_score(snap);
    s.min = std::min(s.min, score);
    sum += score;
  }
  s.mean = sum / static_cast<double>(population.size());
  return s;
}

}  // namespace

TrainCaeResult train_cae(CaeModel& model, const std::vector<AdapterSnapshot>& population,
                         double threshold, int max_steps, const TrainCaeOptions& options) {
  if (population.empty()) throw std::runtime_error("train_cae: empty population");
  for (const AdapterSnapshot& s : population) {
    if (static_cast<int>(s.flat.size()) != model.input_width) {
      throw std::runtime_error("train_cae: width mismatch in population");
    }
  }
  if (threshold > 1.0) {
    // Cosine similarity cannot exceed 1, so the stopping rule can never fire.
    throw CaeThresholdError(threshold, 0.0, 0);
  }
  model.refresh_normalization(population);

  const int check_every = options.check_every > 0 ? options.check_every
                                                  : std::max(1, model.cfg.check_every);
  size_t next_milestone = 0;
  auto maybe_checkpoint = [&](double mean_score) {
    while (options.sink && next_milestone < options.milestones.size() &&
           mean_score >= options.milestones[next_milestone]) {
      options.sink(mean_score, model);
      ++next_milestone;
    }
  };

  TrainCaeResult result;
  Scores s = population_scores(model, population);
  maybe_checkpoint(s.mean);
  double best_min = s.min;
  if (s.min >= threshold) {
    result.min_score = s.min;
    result.mean_score = s.mean;
    return result;
  }

  std::vector<Tensor> params = model.encoder.params();
  for (const Tensor& p : model.decoder.params()) params.push_back(p);
  Adam opt(params, model.cfg.lr);
  Rng rng = Rng(model.cfg.seed).child("train-batches");

  const int n = static_cast<int>(population.size());
  const int bsz = std::min(model.cfg.batch_size, n);
  for (int step = 1; step <= max_steps; ++step) {
    std::vector<const AdapterSnapshot*> batch;
    batch.reserve(bsz);
    if (bsz == n) {
      for (const AdapterSnapshot& snap : population) batch.push_back(&snap);
    } else {
      for (int i = 0; i < bsz; ++i) batch.push_back(&population[rng.uniform_int(n)]);
    }
    TrainLoss loss = train_objective(model, batch, model.cfg.lambda,
                                     model.cfg.scale_anchor);
    const double lval = loss.total.scalar();
    if (!std::isfinite(lval)) throw std::runtime_error("train_cae: loss diverged");
    result.loss_curve.push_back(loss.recon_part);
    backward(loss.total);
    opt.step();
    result.steps = step;
    if (step % check_every == 0 || step == max_steps) {
      s = population_scores(model, population);
      best_min = std::max(best_min, s.min);
      maybe_checkpoint(s.mean);
      if (s.min >= threshold) {
        result.min_score = s.min;
        result.mean_score = s.mean;
        return result;
      }
    }
  }
  throw CaeThresholdError(threshold, best_min, max_steps);
}

std::vector<uint8_t> cae_bytes(const CaeModel& model) {
  std::vector<Section> sections;
  {
    ByteWriter w;
    w.u32(static_cast<uint32_t>(model.cfg.latent_dim));
    w.u32(static_cast<uint32_t>(model.cfg.hidden));
    w.f64(model.cfg.lambda);
    w.f64(model.cfg.threshold);
    w.u64(static_cast<uint64_t>(model.input_width));
    sections.push_back({"META", std::move(w).take()});
  }
  {
    ByteWriter w;
    write_mlp(w, model.encoder);
    sections.push_back({"ENC", std::move(w).take()});
  }
  {
    ByteWriter w;
    write_mlp(w, model.decoder);
    sections.push_back({"DEC", std::move(w).take()});
  }
  {
    ByteWriter w;
    w.u64(static_cast<uint64_t>(model.input_width));
    for (double x : *model.mu.data) w.f32(static_cast<float>(x));
    for (double x : *model.sigma.data) w.f32(static_cast<float>(x));
    sections.push_back({"NRM", std::move(w).take()});
  }
  {
    ByteWriter w;
    write_layout(w, model.layout);
    sections.push_back({"LAYOUT", std::move(w).take()});
  }
  return container_bytes(sections);
}

CaeModel cae_from_bytes(const std::vector<uint8_t>& bytes) {
  std::vector<Section> sections = container_from_bytes(bytes);
  CaeModel m;
  {
    ByteReader r(find_section(sections, "META").payload);
    m.cfg.latent_dim = static_cast<int>(r.u32());
    m.cfg.hidden = static_cast<int>(r.u32());
    m.cfg.lambda = r.f64();
    m.cfg.threshold = r.f64();
    m.input_width = static_cast<int>(r.u64());
  }
  {
    ByteReader r(find_section(sections, "ENC").payload);
    m.encoder = read_mlp(r);
    m.encoder.set_requires_grad(true);
  }
  {
    ByteReader r(find_section(sections, "DEC").payload);
    m.decoder = read_mlp(r);
    m.decoder.set_requires_grad(true);
  }
  {
    ByteReader r(find_section(sections, "NRM").payload);
    const uint64_t l = r.u64();
    m.mu = Tensor::zeros({1, static_cast<int>(l)});
    m.sigma = Tensor::zeros({1, static_cast<int>(l)});
    for (double& x : *m.mu.data) x = static_cast<double>(r.f32());
    for (double& x : *m.sigma.data) x = static_cast<double>(r.f32());
  }
  {
    ByteReader r(find_section(sections, "LAYOUT").payload);
    m.layout = read_layout(r);
  }
  return m;
}

void save_cae(const CaeModel& model, const std::string& path) {
  write_file(path, cae_bytes(model));
}

CaeModel load_cae(const std::string& path) { return cae_from_bytes(read_file(path)); }

}  // namespace cola
