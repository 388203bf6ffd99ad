#include "cola/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "cola/serialize.hpp"

namespace cola {

Mlp Mlp::create(const std::vector<int>& widths, const std::vector<Act>& acts,
                Rng& rng, double init_scale) {
  if (widths.size() < 2 || acts.size() != widths.size() - 1) {
    throw std::runtime_error("mlp: widths/activations mismatch");
  }
  std::vector<DenseLayer> layers;
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer;
    Rng lr = rng.child("layer", l);
    const double std = init_scale / std::sqrt(static_cast<double>(widths[l]));
    layer.w = Tensor::randn({widths[l], widths[l + 1]}, lr, std, true);
    layer.b = Tensor::zeros({1, widths[l + 1]}, true);
    layer.act = acts[l];
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

static Tensor apply_act(const Tensor& x, Act act) {
  switch (act) {
    case Act::Linear: return x;
    case Act::Tanh: return tanh_t(x);
    case Act::Sigmoid: return sigmoid_t(x);
    case Act::Relu: return relu_t(x);
  }
  throw std::runtime_error("mlp: unknown activation");
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (const DenseLayer& l : layers_) {
    h = apply_act(add_rowvec(matmul(h, l.w), l.b), l.act);
  }
  return h;
}

std::vector<Tensor> Mlp::forward_layers(const Tensor& x) const {
  std::vector<Tensor> acts;
  acts.push_back(x);
  Tensor h = x;
  for (const DenseLayer& l : layers_) {
    h = apply_act(add_rowvec(matmul(h, l.w), l.b), l.act);
    acts.push_back(h);
  }
  return acts;
}

std::vector<Tensor> Mlp::params() const {
  std::vector<Tensor> out;
  for (const DenseLayer& l : layers_) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  return out;
}

void Mlp::set_requires_grad(bool on) {
  for (DenseLayer& l : layers_) {
    l.w.set_trainable(on);
    l.b.set_trainable(on);
  }
}

int Mlp::in_width() const {
  if (layers_.empty()) throw std::runtime_error("mlp: empty");
  return layers_.front().w.rows();
}

int Mlp::out_width() const {
  if (layers_.empty()) throw std::runtime_error("mlp: empty");
  return layers_.back().w.cols();
}

Mlp Mlp::clone() const {
  std::vector<DenseLayer> layers;
  for (const DenseLayer& l : layers_) {
    DenseLayer c;
    c.w = l.w.detached_copy();
    c.w.set_trainable(l.w.requires_grad);
    c.b = l.b.detached_copy();
    c.b.set_trainable(l.b.requires_grad);
    c.act = l.act;
    layers.push_back(std::move(c));
  }
  return Mlp(std::move(layers));
}

Tensor jacobian_penalty(const Mlp& net, const Tensor& x_row) {
  if (x_row.shape.size() != 2 || x_row.rows() != 1) {
    throw std::runtime_error("jacobian_penalty: expected a single row input");
  }
  if (x_row.cols() != net.in_width()) {
    throw std::runtime_error("jacobian_penalty: width mismatch");
  }
  std::vector<Tensor> acts = net.forward_layers(x_row);
  Tensor jt;  // [in, out_l], transposed Jacobian accumulated layer by layer
  const auto& layers = net.layers();
  for (size_t l = 0; l < layers.size(); ++l) {
    jt = (l == 0) ? layers[l].w : matmul(jt, layers[l].w);
    const Tensor& a = acts[l + 1];  // post-activation row [1, out_l]
    switch (layers[l].act) {
      case Act::Linear:
        break;
      case Act::Tanh: {
        Tensor d = sub(Tensor::full(a.shape, 1.0), mul(a, a));
        jt = scale_cols(jt, d);
        break;
      }
      case Act::Sigmoid: {
        Tensor d = mul(a, sub(Tensor::full(a.shape, 1.0), a));
        jt = scale_cols(jt, d);
        break;
      }
      case Act::Relu: {
        // Derivative is a constant 0/1 mask almost everywhere.
        Tensor d = Tensor::zeros(a.shape);
        for (size_t i = 0; i < a.numel(); ++i) {
          (*d.data)[i] = (*a.data)[i] > 0.0 ? 1.0 : 0.0;
        }
        jt = scale_cols(jt, d);
        break;
      }
    }
  }
  return sum_sq(jt);
}

void write_mlp(ByteWriter& w, const Mlp& net) {
  w.u32(static_cast<uint32_t>(net.layers().size()));
  for (const DenseLayer& l : net.layers()) {
    w.u32(static_cast<uint32_t>(l.w.rows()));
    w.u32(static_cast<uint32_t>(l.w.cols()));
    w.u8(static_cast<uint8_t>(l.act));
    for (double x : *l.w.data) w.f32(static_cast<float>(x));
    for (double x : *l.b.data) w.f32(static_cast<float>(x));
  }
}

Mlp read_mlp(ByteReader& r) {
  const uint32_t n = r.u32();
  std::vector<DenseLayer> layers;
  for (uint32_t i = 0; i < n; ++i) {
    const int in = static_cast<int>(r.u32());
    const int out = static_cast<int>(r.u32());
    DenseLayer l;
    l.act = static_cast<Act>(r.u8());
    l.w = Tensor::zeros({in, out});
    l.b = Tensor::zeros({1, out});
    for (double& x : *l.w.data) x = static_cast<double>(r.f32());
    for (double& x : *l.b.data) x = static_cast<double>(r.f32());
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Tensor& p : params_) {
    if (!p.requires_grad || !p.grad) throw std::runtime_error("adam: param not trainable");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    for (size_t i = 0; i < p.numel(); ++i) {
      const double g = (*p.grad)[i];
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
      const double mh = m_[k][i] / bc1;
      const double vh = v_[k][i] / bc2;
      (*p.data)[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
    p.zero_grad();
  }
}

}  // namespace cola
