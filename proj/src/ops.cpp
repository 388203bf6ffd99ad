#include "cola/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cola {

namespace {

bool taped(const Tensor& t) { return t.requires_grad || t.node; }
bool want_tape(const Tensor& a) { return grad_enabled() && taped(a); }
bool want_tape(const Tensor& a, const Tensor& b) {
  return grad_enabled() && (taped(a) || taped(b));
}

// A parent receives gradient only if it is a trainable leaf or an interior
// node output; frozen weights are skipped entirely.
bool wants_grad(const Tensor& t) { return t.grad && (t.requires_grad || t.node); }

void attach(Tensor& out, std::vector<Tensor> parents,
            std::function<void(const Tensor&)> bw) {
  out.ensure_grad();  // before any handle copies exist, so all of them share it
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(bw);
}

// C += opA(A) * opB(B); raw accumulate shared by forward and backward paths.
void mm_acc(const double* A, int ar, int ac, bool ta, const double* B, int br,
            int bc, bool tb, double* C) {
  const int m = ta ? ac : ar;
  const int k = ta ? ar : ac;
  const int n = tb ? br : bc;
  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      double* crow = C + static_cast<size_t>(i) * n;
      const double* aro = A + static_cast<size_t>(i) * ac;
      for (int p = 0; p < k; ++p) {
        const double av = aro[p];
        if (av == 0.0) continue;
        const double* brow = B + static_cast<size_t>(p) * bc;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < m; ++i) {
      const double* aro = A + static_cast<size_t>(i) * ac;
      double* crow = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* brow = B + static_cast<size_t>(j) * bc;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += aro[p] * brow[p];
        crow[j] += s;
      }
    }
  } else if (ta && !tb) {
    for (int p = 0; p < k; ++p) {
      const double* aro = A + static_cast<size_t>(p) * ac;
      const double* brow = B + static_cast<size_t>(p) * bc;
      for (int i = 0; i < m; ++i) {
        const double av = aro[i];
        if (av == 0.0) continue;
        double* crow = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      double* crow = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* brow = B + static_cast<size_t>(j) * bc;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += A[static_cast<size_t>(p) * ac + i] * brow[p];
        crow[j] += s;
      }
    }
  }
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape.size() != 2) throw std::runtime_error(std::string(op) + ": needs 2-D tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) throw std::runtime_error(std::string(op) + ": shape mismatch");
}

int vec_len(const Tensor& v, const char* op) {
  if (v.shape.size() == 1) return v.shape[0];
  if (v.shape.size() == 2 && v.shape[0] == 1) return v.shape[1];
  throw std::runtime_error(std::string(op) + ": expected a vector");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = trans_a ? a.cols() : a.rows();
  const int k = trans_a ? a.rows() : a.cols();
  const int k2 = trans_b ? b.cols() : b.rows();
  const int n = trans_b ? b.rows() : b.cols();
  if (k != k2) throw std::runtime_error("matmul: shape mismatch on inner dimension");
  Tensor out = Tensor::zeros({m, n});
  mm_acc(a.data->data(), a.rows(), a.cols(), trans_a, b.data->data(), b.rows(),
         b.cols(), trans_b, out.data->data());
  if (want_tape(a, b)) {
    attach(out, {a, b}, [trans_a, trans_b](const Tensor& o) {
      const Tensor& pa = o.node->parents[0];
      const Tensor& pb = o.node->parents[1];
      const double* g = o.grad->data();
      const int gr = o.rows(), gc = o.cols();
      if (wants_grad(pa)) {
        if (!trans_a) {
          mm_acc(g, gr, gc, false, pb.data->data(), pb.rows(), pb.cols(), !trans_b,
                 pa.grad->data());
        } else {
          mm_acc(pb.data->data(), pb.rows(), pb.cols(), trans_b, g, gr, gc, true,
                 pa.grad->data());
        }
      }
      if (wants_grad(pb)) {
        if (!trans_b) {
          mm_acc(pa.data->data(), pa.rows(), pa.cols(), !trans_a, g, gr, gc, false,
                 pb.grad->data());
        } else {
          mm_acc(g, gr, gc, true, pa.data->data(), pa.rows(), pa.cols(), trans_a,
                 pb.grad->data());
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (want_tape(a, b)) {
    attach(out, {a, b}, [](const Tensor& o) {
      for (int side = 0; side < 2; ++side) {
        const Tensor& p = o.node->parents[side];
        if (!wants_grad(p)) continue;
        for (size_t i = 0; i < o.numel(); ++i) (*p.grad)[i] += (*o.grad)[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  if (want_tape(a, b)) {
    attach(out, {a, b}, [](const Tensor& o) {
      const Tensor& pa = o.node->parents[0];
      const Tensor& pb = o.node->parents[1];
      for (size_t i = 0; i < o.numel(); ++i) {
        if (wants_grad(pa)) (*pa.grad)[i] += (*o.grad)[i];
        if (wants_grad(pb)) (*pb.grad)[i] -= (*o.grad)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (want_tape(a, b)) {
    attach(out, {a, b}, [](const Tensor& o) {
      const Tensor& pa = o.node->parents[0];
      const Tensor& pb = o.node->parents[1];
      for (size_t i = 0; i < o.numel(); ++i) {
        const double g = (*o.grad)[i];
        if (wants_grad(pa)) (*pa.grad)[i] += g * (*pb.data)[i];
        if (wants_grad(pb)) (*pb.grad)[i] += g * (*pa.data)[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  if (want_tape(a)) {
    attach(out, {a}, [s](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (size_t i = 0; i < o.numel(); ++i) (*p.grad)[i] += s * (*o.grad)[i];
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_2d(a, "add_rowvec");
  const int m = vec_len(v, "add_rowvec");
  if (a.cols() != m) throw std::runtime_error("add_rowvec: width mismatch");
  Tensor out = Tensor::zeros(a.shape);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < m; ++j)
      out.at(i, j) = a.at(i, j) + (*v.data)[j];
  if (want_tape(a, v)) {
    attach(out, {a, v}, [m](const Tensor& o) {
      const Tensor& pa = o.node->parents[0];
      const Tensor& pv = o.node->parents[1];
      for (int i = 0; i < o.rows(); ++i) {
        for (int j = 0; j < m; ++j) {
          const double g = (*o.grad)[static_cast<size_t>(i) * m + j];
          if (wants_grad(pa)) (*pa.grad)[static_cast<size_t>(i) * m + j] += g;
          if (wants_grad(pv)) (*pv.grad)[j] += g;
        }
      }
    });
  }
  return out;
}

Tensor scale_cols(const Tensor& a, const Tensor& v) {
  require_2d(a, "scale_cols");
  const int m = vec_len(v, "scale_cols");
  if (a.cols() != m) throw std::runtime_error("scale_cols: width mismatch");
  Tensor out = Tensor::zeros(a.shape);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < m; ++j)
      out.at(i, j) = a.at(i, j) * (*v.data)[j];
  if (want_tape(a, v)) {
    attach(out, {a, v}, [m](const Tensor& o) {
      const Tensor& pa = o.node->parents[0];
      const Tensor& pv = o.node->parents[1];
      for (int i = 0; i < o.rows(); ++i) {
        for (int j = 0; j < m; ++j) {
          const double g = (*o.grad)[static_cast<size_t>(i) * m + j];
          if (wants_grad(pa)) (*pa.grad)[static_cast<size_t>(i) * m + j] += g * (*pv.data)[j];
          if (wants_grad(pv)) (*pv.grad)[j] += g * pa.at(i, j);
        }
      }
    });
  }
  return out;
}

Tensor tanh_t(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::tanh((*a.data)[i]);
  if (want_tape(a)) {
    attach(out, {a}, [](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (size_t i = 0; i < o.numel(); ++i) {
        const double y = (*o.data)[i];
        (*p.grad)[i] += (*o.grad)[i] * (1.0 - y * y);
      }
    });
  }
  return out;
}

Tensor sigmoid_t(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) {
    const double x = (*a.data)[i];
    (*out.data)[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                              : std::exp(x) / (1.0 + std::exp(x));
  }
  if (want_tape(a)) {
    attach(out, {a}, [](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (size_t i = 0; i < o.numel(); ++i) {
        const double y = (*o.data)[i];
        (*p.grad)[i] += (*o.grad)[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor relu_t(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::max(0.0, (*a.data)[i]);
  if (want_tape(a)) {
    attach(out, {a}, [](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (size_t i = 0; i < o.numel(); ++i) {
        if ((*p.data)[i] > 0.0) (*p.grad)[i] += (*o.grad)[i];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  double s = 0.0;
  for (double x : *a.data) s += x;
  (*out.data)[0] = s;
  if (want_tape(a)) {
    attach(out, {a}, [](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      const double g = (*o.grad)[0];
      for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::runtime_error("mean: empty tensor");
  Tensor out = Tensor::zeros({1});
  double s = 0.0;
  for (double x : *a.data) s += x;
  (*out.data)[0] = s / static_cast<double>(a.numel());
  if (want_tape(a)) {
    attach(out, {a}, [](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      const double g = (*o.grad)[0] / static_cast<double>(p.numel());
      for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += g;
    });
  }
  return out;
}

Tensor sum_sq(const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  double s = 0.0;
  for (double x : *a.data) s += x * x;
  (*out.data)[0] = s;
  if (want_tape(a)) {
    attach(out, {a}, [](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      const double g = (*o.grad)[0];
      for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += 2.0 * (*p.data)[i] * g;
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "gather_rows");
  const int n = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= n) throw std::runtime_error("gather_rows: index out of range");
  }
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(out.data->data() + i * d,
                table.data->data() + static_cast<size_t>(ids[i]) * d,
                sizeof(double) * d);
  }
  if (want_tape(table)) {
    attach(out, {table}, [ids, d](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (size_t i = 0; i < ids.size(); ++i) {
        double* dst = p.grad->data() + static_cast<size_t>(ids[i]) * d;
        const double* src = o.grad->data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  require_2d(a, "slice_rows");
  if (start < 0 || len <= 0 || start + len > a.rows()) {
    throw std::runtime_error("slice_rows: range out of bounds");
  }
  const int d = a.cols();
  Tensor out = Tensor::zeros({len, d});
  std::memcpy(out.data->data(), a.data->data() + static_cast<size_t>(start) * d,
              sizeof(double) * static_cast<size_t>(len) * d);
  if (want_tape(a)) {
    attach(out, {a}, [start, len, d](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      double* dst = p.grad->data() + static_cast<size_t>(start) * d;
      const double* src = o.grad->data();
      for (size_t i = 0; i < static_cast<size_t>(len) * d; ++i) dst[i] += src[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  require_2d(a, "slice_cols");
  if (start < 0 || len <= 0 || start + len > a.cols()) {
    throw std::runtime_error("slice_cols: range out of bounds");
  }
  const int n = a.rows(), w = a.cols();
  Tensor out = Tensor::zeros({n, len});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data->data() + static_cast<size_t>(i) * len,
                a.data->data() + static_cast<size_t>(i) * w + start,
                sizeof(double) * len);
  }
  if (want_tape(a)) {
    attach(out, {a}, [start, len, w](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (int i = 0; i < o.rows(); ++i) {
        double* dst = p.grad->data() + static_cast<size_t>(i) * w + start;
        const double* src = o.grad->data() + static_cast<size_t>(i) * len;
        for (int j = 0; j < len; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: no parts");
  const int d = parts[0].cols();
  int total = 0;
  bool tape = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != d) throw std::runtime_error("concat_rows: width mismatch");
    total += p.rows();
    tape = tape || taped(p);
  }
  Tensor out = Tensor::zeros({total, d});
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.data->data() + off, p.data->data(), sizeof(double) * p.numel());
    off += p.numel();
  }
  if (grad_enabled() && tape) {
    attach(out, parts, [](const Tensor& o) {
      size_t off = 0;
      for (const Tensor& p : o.node->parents) {
        if (wants_grad(p)) {
          const double* src = o.grad->data() + off;
          for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += src[i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: no parts");
  const int n = parts[0].rows();
  int total = 0;
  bool tape = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != n) throw std::runtime_error("concat_cols: height mismatch");
    total += p.cols();
    tape = tape || taped(p);
  }
  Tensor out = Tensor::zeros({n, total});
  int coff = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < n; ++i) {
      std::memcpy(out.data->data() + static_cast<size_t>(i) * total + coff,
                  p.data->data() + static_cast<size_t>(i) * p.cols(),
                  sizeof(double) * p.cols());
    }
    coff += p.cols();
  }
  if (grad_enabled() && tape) {
    attach(out, parts, [total](const Tensor& o) {
      int coff = 0;
      for (const Tensor& p : o.node->parents) {
        const int w = p.cols();
        if (wants_grad(p)) {
          for (int i = 0; i < p.rows(); ++i) {
            const double* src = o.grad->data() + static_cast<size_t>(i) * total + coff;
            double* dst = p.grad->data() + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        coff += w;
      }
    });
  }
  return out;
}

Tensor row_mean_blocks(const Tensor& a, int block) {
  require_2d(a, "row_mean_blocks");
  if (block <= 0 || a.rows() % block != 0) {
    throw std::runtime_error("row_mean_blocks: rows not divisible by block");
  }
  const int b = a.rows() / block, d = a.cols();
  Tensor out = Tensor::zeros({b, d});
  for (int i = 0; i < b; ++i) {
    for (int r = 0; r < block; ++r) {
      const double* src = a.data->data() + (static_cast<size_t>(i) * block + r) * d;
      double* dst = out.data->data() + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  for (double& x : *out.data) x /= block;
  if (want_tape(a)) {
    attach(out, {a}, [block, d](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (int i = 0; i < o.rows(); ++i) {
        const double* src = o.grad->data() + static_cast<size_t>(i) * d;
        for (int r = 0; r < block; ++r) {
          double* dst = p.grad->data() + (static_cast<size_t>(i) * block + r) * d;
          for (int j = 0; j < d; ++j) dst[j] += src[j] / block;
        }
      }
    });
  }
  return out;
}

Tensor causal_row_softmax(const Tensor& scores) {
  require_2d(scores, "causal_row_softmax");
  const int t = scores.rows();
  if (scores.cols() != t) throw std::runtime_error("causal_row_softmax: square input required");
  Tensor out = Tensor::zeros({t, t});
  for (int i = 0; i < t; ++i) {
    double mx = -1e300;
    for (int j = 0; j <= i; ++j) mx = std::max(mx, scores.at(i, j));
    double z = 0.0;
    for (int j = 0; j <= i; ++j) z += std::exp(scores.at(i, j) - mx);
    for (int j = 0; j <= i; ++j) out.at(i, j) = std::exp(scores.at(i, j) - mx) / z;
  }
  out.check_finite("causal_row_softmax");
  if (want_tape(scores)) {
    attach(out, {scores}, [t](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (int i = 0; i < t; ++i) {
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) {
          dot += (*o.grad)[static_cast<size_t>(i) * t + j] * o.at(i, j);
        }
        for (int j = 0; j <= i; ++j) {
          const double pij = o.at(i, j);
          (*p.grad)[static_cast<size_t>(i) * t + j] +=
              pij * ((*o.grad)[static_cast<size_t>(i) * t + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor rmsnorm_rows(const Tensor& a, double eps) {
  require_2d(a, "rmsnorm_rows");
  const int n = a.rows(), d = a.cols();
  Tensor out = Tensor::zeros({n, d});
  auto rs = std::make_shared<std::vector<double>>(n);
  for (int i = 0; i < n; ++i) {
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += a.at(i, j) * a.at(i, j);
    ms /= d;
    const double r = 1.0 / std::sqrt(ms + eps);
    (*rs)[i] = r;
    for (int j = 0; j < d; ++j) out.at(i, j) = a.at(i, j) * r;
  }
  if (want_tape(a)) {
    attach(out, {a}, [rs, d](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      for (int i = 0; i < o.rows(); ++i) {
        const double r = (*rs)[i];
        double gx = 0.0;
        for (int j = 0; j < d; ++j) {
          gx += (*o.grad)[static_cast<size_t>(i) * d + j] * p.at(i, j);
        }
        const double c = r * r * r * gx / d;
        for (int j = 0; j < d; ++j) {
          (*p.grad)[static_cast<size_t>(i) * d + j] +=
              (*o.grad)[static_cast<size_t>(i) * d + j] * r - c * p.at(i, j);
        }
      }
    });
  }
  return out;
}

Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels) {
  require_2d(logits, "softmax_xent");
  const int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(labels.size()) != n) {
    throw std::runtime_error("softmax_xent: label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= v) throw std::runtime_error("softmax_xent: label out of range");
  }
  Tensor out = Tensor::zeros({1});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int j = 0; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(logits.at(i, j) - mx);
    total += mx + std::log(z) - logits.at(i, labels[i]);
  }
  (*out.data)[0] = total / n;
  out.check_finite("softmax_xent");
  if (want_tape(logits)) {
    attach(out, {logits}, [labels, n, v](const Tensor& o) {
      const Tensor& p = o.node->parents[0];
      if (!wants_grad(p)) return;
      const double g = (*o.grad)[0] / n;
      for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j < v; ++j) mx = std::max(mx, p.at(i, j));
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(p.at(i, j) - mx);
        for (int j = 0; j < v; ++j) {
          const double prob = std::exp(p.at(i, j) - mx) / z;
          (*p.grad)[static_cast<size_t>(i) * v + j] +=
              g * (prob - (j == labels[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.numel() == 0) {
    throw std::runtime_error("cosine_similarity: length mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    dot += (*a.data)[i] * (*b.data)[i];
    na += (*a.data)[i] * (*a.data)[i];
    nb += (*b.data)[i] * (*b.data)[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw std::runtime_error("cosine_similarity: zero-norm input");
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const double c = dot / (na * nb);
  Tensor out = Tensor::zeros({1});
  (*out.data)[0] = c;
  if (want_tape(a, b)) {
    attach(out, {a, b}, [na, nb, c](const Tensor& o) {
      const Tensor& pa = o.node->parents[0];
      const Tensor& pb = o.node->parents[1];
      const double g = (*o.grad)[0];
      for (size_t i = 0; i < pa.numel(); ++i) {
        const double av = (*pa.data)[i], bv = (*pb.data)[i];
        if (wants_grad(pa)) (*pa.grad)[i] += g * (bv / (na * nb) - c * av / (na * na));
        if (wants_grad(pb)) (*pb.grad)[i] += g * (av / (na * nb) - c * bv / (nb * nb));
      }
    });
  }
  return out;
}

std::vector<double> softmax_row(const double* x, int n) {
  double mx = -1e300;
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  std::vector<double> p(n);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(x[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace cola
