#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cola/rng.hpp"

namespace cola {

class Tensor;

// One recorded primitive: the tensors it consumed and how to push the output
// gradient back into them. A backward pass replays these records in reverse
// topological order.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(const Tensor& out)> backward;
};

// Dense row-major tensor of 64-bit reals (1-D or 2-D throughout this project).
// Copies are shallow handles onto shared storage; training math is f64, 32-bit
// narrowing happens only at persistence boundaries. Grad buffers are allocated
// at construction (trainable leaves) or attach time (op outputs) so every
// handle copy shares the same accumulator.
class Tensor {
 public:
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double std,
                      bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data); }
  size_t numel() const;
  int rows() const;  // 2-D only
  int cols() const;

  double& at(int i, int j) { return (*data)[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return (*data)[static_cast<size_t>(i) * cols() + j]; }
  double scalar() const;  // numel()==1

  void ensure_grad() const;
  void zero_grad() const;
  // Flips trainability; allocates the shared grad buffer when turning on.
  void set_trainable(bool on);
  void check_finite(const char* what) const;  // throws on NaN/Inf anywhere

  Tensor detached_copy() const;  // deep copy of data, no tape linkage
};

size_t shape_numel(const std::vector<int>& shape);

// Global (thread-local) tape switch. Eval paths run under NoGradGuard.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse accumulation from a scalar loss through the recorded tape.
void backward(const Tensor& loss);

// Gradients of a scalar taped loss w.r.t. each param, same shapes. Errors if
// loss is not scalar, or a param is untracked / unreachable from the loss.
std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& params);

// FNV-1a over the raw bytes of each tensor in order; used for freeze audits.
uint64_t checksum(const std::vector<Tensor>& tensors);

}  // namespace cola
