#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cola {

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

// One task's labeled sequences. The handle is destroyed by the harness once
// training on the task is complete; any later access throws, which is how the
// no-rehearsal constraint is made auditable.
class TaskDataset {
 public:
  TaskDataset() = default;
  TaskDataset(std::string task_id, std::vector<Example> train,
              std::vector<Example> valid, std::vector<Example> test)
      : task_id_(std::move(task_id)),
        train_(std::move(train)),
        valid_(std::move(valid)),
        test_(std::move(test)) {}

  const std::string& task_id() const { return task_id_; }

  const std::vector<Example>& train() const { return access(train_); }
  const std::vector<Example>& valid() const { return access(valid_); }
  const std::vector<Example>& test() const { return access(test_); }

  bool destroyed() const { return destroyed_; }
  bool empty() const { return !destroyed_ && train_.empty(); }

  // Irrevocably drops every example held by this handle.
  void destroy() {
    train_.clear();
    train_.shrink_to_fit();
    valid_.clear();
    valid_.shrink_to_fit();
    test_.clear();
    test_.shrink_to_fit();
    destroyed_ = true;
  }

  // Moves the held-out split to the caller (measurement harness); the handle
  // keeps only train/valid for the learner.
  std::vector<Example> take_test() {
    if (destroyed_) throw std::runtime_error("dataset: destroyed");
    std::vector<Example> out = std::move(test_);
    test_.clear();
    return out;
  }

 private:
  const std::vector<Example>& access(const std::vector<Example>& split) const {
    if (destroyed_) {
      throw std::runtime_error("dataset '" + task_id_ +
                               "': accessed after destruction (no-rehearsal violation)");
    }
    return split;
  }

  std::string task_id_;
  std::vector<Example> train_, valid_, test_;
  bool destroyed_ = false;
};

}  // namespace cola
