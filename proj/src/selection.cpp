#include "cola/selection.hpp"

#include <cmath>
#include <future>
#include <stdexcept>

#include "cola/ops.hpp"

namespace cola {

double perplexity(const BackboneModel& model, const AdapterWeights* adapter,
                  const std::vector<int>& tokens) {
  const int t = static_cast<int>(tokens.size());
  if (t < 2) {
    throw std::runtime_error("perplexity: sequence too short (needs one conditional)");
  }
  NoGradGuard ng;
  ForwardOut out = forward(model, adapter, tokens);
  const int v = model.cfg.vocab_size;
  double nll = 0.0;
  for (int p = 0; p + 1 < t; ++p) {
    const double* row = out.lm_logits.data->data() + static_cast<size_t>(p) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    nll += mx + std::log(z) - row[tokens[p + 1]];
  }
  return std::exp(nll / (t - 1));
}

namespace {

std::vector<std::string> store_task_ids(const LatentStore& store) {
  std::vector<std::string> ids;
  ids.reserve(store.codes.size());
  for (const auto& [id, code] : store.codes) ids.push_back(id);
  return ids;
}

// Scores each task id against the input; decodes one adapter at a time.
std::map<std::string, double> score_all(const LatentStore& store,
                                        const BackboneModel& model,
                                        const std::vector<int>& tokens,
                                        int n_threads) {
  const std::vector<std::string> ids = store_task_ids(store);
  std::vector<double> scores(ids.size());
  auto score_one = [&](size_t i) {
    NoGradGuard ng;
    AdapterSnapshot snap = fetch_adapter(store, ids[i]);
    AdapterWeights w = devectorize(snap);
    return perplexity(model, &w, tokens);
  };
  if (n_threads <= 1 || ids.size() <= 1) {
    for (size_t i = 0; i < ids.size(); ++i) scores[i] = score_one(i);
  } else {
    std::vector<std::future<double>> futs(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      futs[i] = std::async(std::launch::async, score_one, i);
    }
    for (size_t i = 0; i < ids.size(); ++i) scores[i] = futs[i].get();
  }
  std::map<std::string, double> out;
  for (size_t i = 0; i < ids.size(); ++i) out[ids[i]] = scores[i];
  return out;
}

}  // namespace

SelectionResult select_adapter(const LatentStore& store, const BackboneModel& model,
                               const std::vector<int>& tokens,
                               const std::optional<std::string>& task_id,
                               int n_threads) {
  if (store.empty()) throw std::runtime_error("select: empty store");
  SelectionResult result;
  result.input_len = static_cast<int>(tokens.size());
  if (task_id.has_value()) {
    AdapterSnapshot snap = fetch_adapter(store, *task_id);  // throws on unknown id
    AdapterWeights w = devectorize(snap);
    result.ppl[*task_id] = perplexity(model, &w, tokens);
    result.chosen = *task_id;
    return result;
  }
  result.ppl = score_all(store, model, tokens, n_threads);
  // std::map iterates in key order, so strict < keeps the lexicographically
  // smallest id on ties.
  double best = 0.0;
  bool first = true;
  for (const auto& [id, p] : result.ppl) {
    if (first || p < best) {
      best = p;
      result.chosen = id;
      first = false;
    }
  }
  return result;
}

std::string pick_warm_start(const LatentStore& store, const BackboneModel& model,
                            const std::vector<std::vector<int>>& sample,
                            int n_threads) {
  if (store.empty()) throw std::runtime_error("pick_warm_start: empty store");
  if (sample.empty()) throw std::runtime_error("pick_warm_start: empty sample");
  const std::vector<std::string> ids = store_task_ids(store);
  std::vector<double> means(ids.size());
  auto mean_one = [&](size_t i) {
    NoGradGuard ng;
    AdapterSnapshot snap = fetch_adapter(store, ids[i]);
    AdapterWeights w = devectorize(snap);
    double total = 0.0;
    for (const auto& tokens : sample) total += perplexity(model, &w, tokens);
    return total / static_cast<double>(sample.size());
  };
  if (n_threads <= 1 || ids.size() <= 1) {
    for (size_t i = 0; i < ids.size(); ++i) means[i] = mean_one(i);
  } else {
    std::vector<std::future<double>> futs(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      futs[i] = std::async(std::launch::async, mean_one, i);
    }
    for (size_t i = 0; i < ids.size(); ++i) means[i] = futs[i].get();
  }
  size_t best = 0;
  for (size_t i = 1; i < ids.size(); ++i) {
    if (means[i] < means[best]) best = i;
  }
  return ids[best];
}

}  // namespace cola
