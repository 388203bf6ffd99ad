#pragma once

#include <vector>

#include "cola/tensor.hpp"

namespace cola {

// Taped primitives. Each records a reverse rule when grad mode is on and any
// input participates in differentiation.

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // a[n,m] + v per row
Tensor scale_cols(const Tensor& a, const Tensor& v);  // a[:,j] * v[j]

Tensor tanh_t(const Tensor& a);
Tensor sigmoid_t(const Tensor& a);
Tensor relu_t(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_sq(const Tensor& a);

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor row_mean_blocks(const Tensor& a, int block);  // [B*T,d] -> [B,d]

// Row-wise softmax over a square score matrix where row i sees columns <= i.
Tensor causal_row_softmax(const Tensor& scores);
Tensor rmsnorm_rows(const Tensor& a, double eps = 1e-5);

// Mean negative log-likelihood with max-subtraction stabilization.
Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels);

// dot(a,b) / (|a||b|) over all elements; errors on zero-norm input.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// Untaped helper: softmax of one row of n logits.
std::vector<double> softmax_row(const double* x, int n);

}  // namespace cola
