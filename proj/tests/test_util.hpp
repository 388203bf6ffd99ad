#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cola/ops.hpp"
#include "cola/rng.hpp"
#include "cola/tensor.hpp"

namespace cola::testing {

// Central finite-difference check of reverse-mode gradients: d loss / d param
// vs (f(p+h) - f(p-h)) / 2h on randomly chosen coordinates.
struct FdReport {
  int checked = 0;
  double worst_rel_err = 0.0;
};

inline FdReport fd_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& params, int n_coords, Rng& rng,
                         double step = 1e-5, double tol = 1e-4,
                         double abs_floor = 1e-8) {
  Tensor loss = loss_fn();
  std::vector<Tensor> grads = grad(loss, params);
  FdReport report;
  for (int c = 0; c < n_coords; ++c) {
    const size_t pi = static_cast<size_t>(rng.uniform_int(static_cast<int>(params.size())));
    const Tensor& p = params[pi];
    const size_t ei = static_cast<size_t>(rng.uniform_int(static_cast<int>(p.numel())));
    const double saved = (*p.data)[ei];
    (*p.data)[ei] = saved + step;
    const double up = loss_fn().scalar();
    (*p.data)[ei] = saved - step;
    const double dn = loss_fn().scalar();
    (*p.data)[ei] = saved;
    const double fd = (up - dn) / (2.0 * step);
    const double an = (*grads[pi].data)[ei];
    const double denom = std::max({std::abs(fd), std::abs(an), abs_floor});
    const double rel = std::abs(fd - an) / denom;
    report.worst_rel_err = std::max(report.worst_rel_err, rel);
    ++report.checked;
    if (rel >= tol && std::abs(fd - an) > abs_floor) {
      throw std::runtime_error("fd_check: gradient mismatch (analytic " +
                               std::to_string(an) + ", fd " + std::to_string(fd) + ")");
    }
  }
  return report;
}

// Scalarizes an arbitrary tensor with fixed random weights so any op can be
// finite-difference checked through a scalar loss.
inline Tensor weighted_sum(const Tensor& t, const Tensor& weights) {
  return cola::sum(cola::mul(t, weights));
}

}  // namespace cola::testing
