#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/lora.hpp"
#include "cola/nn.hpp"
#include "cola/tensor.hpp"

namespace cola {

struct CaeConfig {
  int latent_dim = 50;
  int hidden = 1024;
  double lambda = 1e-4;  // contractive coefficient
  double lr = 2e-3;
  double threshold = 0.99;
  int max_steps = 20000;
  int batch_size = 8;
  int check_every = 10;
  uint64_t seed = 7;
  bool retrain_from_decodes = false;  // rebuild population from stored codes
  // Weight of the norm-ratio anchor used during training. The cosine
  // reconstruction term is scale-blind, so without an anchor the decoder's
  // output magnitude drifts freely and decoded adapters come back rescaled.
  double scale_anchor = 1.0;
};

struct LatentCode {
  std::string task_id;
  std::vector<double> z;
  double reconstruction_score = 0.0;  // cosine vs the original, recorded at encode time
};

// Raised when train_cae cannot reach the stopping threshold.
class CaeThresholdError : public std::runtime_error {
 public:
  CaeThresholdError(double threshold, double best, int steps)
      : std::runtime_error("cae: threshold " + std::to_string(threshold) +
                           " unreachable within " + std::to_string(steps) +
                           " steps (best score " + std::to_string(best) + ")"),
        best_score(best) {}
  double best_score;
};

// Contractive autoencoder over flattened adapters. Inputs are standardized
// per coordinate with stats taken over the training population; decode
// inverts the standardization.
class CaeModel {
 public:
  Mlp encoder;  // L -> hidden -> m, tanh then linear
  Mlp decoder;  // m -> hidden -> L
  Tensor mu;     // [1, L]
  Tensor sigma;  // [1, L]
  SnapshotLayout layout;  // reattached to decoded snapshots
  CaeConfig cfg;
  int input_width = 0;  // L

  static CaeModel create(int input_width, const SnapshotLayout& layout,
                         const CaeConfig& cfg);

  LatentCode encode(const AdapterSnapshot& snapshot) const;
  AdapterSnapshot decode(const LatentCode& code) const;
  double reconstruction_score(const AdapterSnapshot& snapshot) const;

  void refresh_normalization(const std::vector<AdapterSnapshot>& population);
  CaeModel clone() const;
};

// Sum over (i,j) of squared d(latent_j)/d(input_i) at this input, as a taped
// scalar. The input is taken as the encoder's own input (already standardized
// when called from the loss).
Tensor contractive_penalty_t(const CaeModel& model, const Tensor& x_row);
double contractive_penalty(const CaeModel& model, const std::vector<double>& input);

// Mean over the batch of (1 - cos(theta, theta_hat)) + lambda * penalty.
Tensor cae_loss_t(const CaeModel& model, const std::vector<const AdapterSnapshot*>& batch,
                  double lambda);
double cae_loss(const CaeModel& model, const std::vector<AdapterSnapshot>& batch);

struct TrainCaeOptions {
  // Capture a deep model copy whenever the mean population score first
  // crosses each milestone (ascending).
  std::vector<double> milestones;
  std::function<void(double mean_score, const CaeModel& model)> sink;
  int check_every = 0;  // 0 = use cfg.check_every
};

struct TrainCaeResult {
  int steps = 0;
  double min_score = 0.0;
  double mean_score = 0.0;
  std::vector<double> loss_curve;
};

// Trains until every population member reconstructs at or above `threshold`,
// or throws CaeThresholdError at max_steps. Safe to call repeatedly as the
// population grows (warm weights, refreshed normalization).
TrainCaeResult train_cae(CaeModel& model, const std::vector<AdapterSnapshot>& population,
                         double threshold, int max_steps,
                         const TrainCaeOptions& options = {});

// Container I/O (sections ENC, DEC, NRM, LAYOUT).
std::vector<uint8_t> cae_bytes(const CaeModel& model);
CaeModel cae_from_bytes(const std::vector<uint8_t>& bytes);
void save_cae(const CaeModel& model, const std::string& path);
CaeModel load_cae(const std::string& path);

}  // namespace cola
