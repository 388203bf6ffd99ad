#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cola/backbone.hpp"
#include "cola/lora.hpp"
#include "cola/store.hpp"

namespace cola {

// exp of the mean negative conditional log-likelihood over the |x|-1
// next-token conditionals under the adapter-equipped LM head.
double perplexity(const BackboneModel& model, const AdapterWeights* adapter,
                  const std::vector<int>& tokens);

struct SelectionResult {
  std::string chosen;
  std::map<std::string, double> ppl;  // task_id -> perplexity
  int input_len = 0;
};

// Stage-3 routing: with a task id, score only that adapter; otherwise decode
// and score all of them and take the argmin (lexicographic task_id on ties).
// n_threads > 1 scores adapters concurrently; results are identical either way.
SelectionResult select_adapter(const LatentStore& store, const BackboneModel& model,
                               const std::vector<int>& tokens,
                               const std::optional<std::string>& task_id = std::nullopt,
                               int n_threads = 1);

// Donor choice for warm starts: argmin of mean perplexity over the sample.
std::string pick_warm_start(const LatentStore& store, const BackboneModel& model,
                            const std::vector<std::vector<int>>& sample,
                            int n_threads = 1);

}  // namespace cola
