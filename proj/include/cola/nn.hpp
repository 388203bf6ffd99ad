#pragma once

#include <string>
#include <vector>

#include "cola/ops.hpp"
#include "cola/rng.hpp"
#include "cola/tensor.hpp"

namespace cola {

enum class Act : uint8_t { Linear = 0, Tanh = 1, Sigmoid = 2, Relu = 3 };

struct DenseLayer {
  Tensor w;  // [in, out]
  Tensor b;  // [1, out]
  Act act = Act::Linear;
};

// Plain affine stack. Used for the autoencoder halves and small probes.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {}

  static Mlp create(const std::vector<int>& widths, const std::vector<Act>& acts,
                    Rng& rng, double init_scale = 1.0);

  Tensor forward(const Tensor& x) const;  // [n,in] -> [n,out]
  // Activations after every layer (index 0 is the input itself).
  std::vector<Tensor> forward_layers(const Tensor& x) const;

  std::vector<Tensor> params() const;
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  void set_requires_grad(bool on);
  int in_width() const;
  int out_width() const;
  Mlp clone() const;  // deep copy

 private:
  std::vector<DenseLayer> layers_;
};

// Squared Frobenius norm of d(output)/d(input) at one input row, composed
// from taped ops so gradients flow into the weights through the activation
// derivatives as well.
Tensor jacobian_penalty(const Mlp& net, const Tensor& x_row);

class ByteWriter;
class ByteReader;
void write_mlp(ByteWriter& w, const Mlp& net);
Mlp read_mlp(ByteReader& r);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  // Applies one update in place from accumulated grads, then zeroes them.
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace cola
