#include "cola/tensor.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

namespace cola {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::runtime_error("tensor: negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(shape_numel(t.shape), 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : *t.data) x = value;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::runtime_error("tensor: shape does not match value count");
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  t.check_finite("tensor::from");
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double std, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : *t.data) x = rng.gaussian(0.0, std);
  return t;
}

size_t Tensor::numel() const { return data ? data->size() : 0; }

int Tensor::rows() const {
  if (shape.size() != 2) throw std::runtime_error("tensor: rows() needs a 2-D tensor");
  return shape[0];
}

int Tensor::cols() const {
  if (shape.size() != 2) throw std::runtime_error("tensor: cols() needs a 2-D tensor");
  return shape[1];
}

double Tensor::scalar() const {
  if (numel() != 1) throw std::runtime_error("tensor: scalar() on non-scalar");
  return (*data)[0];
}

void Tensor::ensure_grad() const {
  if (!grad) {
    const_cast<Tensor*>(this)->grad =
        std::make_shared<std::vector<double>>(numel(), 0.0);
  }
}

void Tensor::zero_grad() const {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

void Tensor::set_trainable(bool on) {
  requires_grad = on;
  if (on) ensure_grad();
}

void Tensor::check_finite(const char* what) const {
  for (double x : *data) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(what) + ": non-finite value in tensor");
    }
  }
}

Tensor Tensor::detached_copy() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  t.requires_grad = false;
  return t;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

namespace {

// Iterative post-order over the op graph rooted at `loss`.
std::vector<Node*> topo_order(const Tensor& loss) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (loss.node) {
    stack.push_back({loss.node.get(), 0});
    visited.insert(loss.node.get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].node.get();
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;
}

// Tensors reachable from the loss (by storage identity), including leaves.
std::unordered_set<const std::vector<double>*> reachable_storage(const Tensor& loss) {
  std::unordered_set<const std::vector<double>*> seen;
  seen.insert(loss.data.get());
  for (Node* n : topo_order(loss)) {
    for (const Tensor& p : n->parents) seen.insert(p.data.get());
  }
  return seen;
}

}  // namespace

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::runtime_error("backward: loss must be scalar");
  loss.ensure_grad();
  (*loss.grad)[0] = 1.0;
  std::vector<Node*> order = topo_order(loss);
  // Each node's output tensor is needed to invoke its backward; nodes are
  // discovered from their consumers, which run first in reverse order.
  std::unordered_map<Node*, Tensor> outputs;
  if (loss.node) outputs.emplace(loss.node.get(), loss);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto out_it = outputs.find(n);
    if (out_it == outputs.end()) continue;  // unreachable output (not used)
    const Tensor& out = out_it->second;
    if (!out.grad) continue;
    for (const Tensor& p : n->parents) {
      if (p.node) outputs.emplace(p.node.get(), p);
    }
    if (n->backward) n->backward(out);
  }
}

std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& params) {
  if (loss.numel() != 1) throw std::runtime_error("grad: loss must be scalar");
  auto reachable = reachable_storage(loss);
  for (const Tensor& p : params) {
    if (!p.requires_grad) {
      throw std::runtime_error("grad: param is not marked trainable");
    }
    if (!reachable.count(p.data.get())) {
      throw std::runtime_error("grad: param not on the tape for this loss");
    }
  }
  for (const Tensor& p : params) p.zero_grad();
  backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor& p : params) {
    p.ensure_grad();
    Tensor g;
    g.shape = p.shape;
    g.data = std::make_shared<std::vector<double>>(*p.grad);
    out.push_back(std::move(g));
  }
  return out;
}

uint64_t checksum(const std::vector<Tensor>& tensors) {
  uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const void* ptr, size_t n) {
    const auto* b = static_cast<const unsigned char*>(ptr);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const Tensor& t : tensors) {
    for (int d : t.shape) feed(&d, sizeof(d));
    if (t.data) feed(t.data->data(), t.data->size() * sizeof(double));
  }
  return h;
}

}  // namespace cola
