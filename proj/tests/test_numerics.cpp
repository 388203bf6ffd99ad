#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "cola/nn.hpp"
#include "cola/ops.hpp"
#include "cola/rng.hpp"
#include "cola/tensor.hpp"
#include "test_util.hpp"

using namespace cola;

namespace {

// Independent reference: naive triple loop, no shared code with the op.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::zeros({a.rows(), b.cols()});
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max(1e-30, std::abs((*b.data)[i]));
    worst = std::max(worst, std::abs((*a.data)[i] - (*b.data)[i]) / denom);
  }
  return worst;
}

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool rg = false, double std = 1.0) {
  return Tensor::randn(std::move(shape), rng, std, rg);
}

}  // namespace

TEST_CASE("rng is deterministic and splittable") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(123).child("x");
  Rng d = Rng(123).child("y");
  CHECK(c.next_u64() != d.next_u64());
  Rng e = Rng(123).child("x");
  CHECK(Rng(123).child("x").next_u64() == e.next_u64());
  Rng g(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = g.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const int k = g.uniform_int(10);
    CHECK(k >= 0);
    CHECK(k < 10);
  }
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}));
  CHECK_THROWS(Tensor::from({2}, {1.0, std::nan("")}));
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
  (*t.data)[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS(t.check_finite("test"));
}

TEST_CASE("matmul identity and zero") {
  Rng rng(1);
  Tensor m = rand_tensor({3, 3}, rng);
  Tensor id = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0;
  Tensor out = matmul(id, m);
  for (size_t i = 0; i < m.numel(); ++i) CHECK((*out.data)[i] == (*m.data)[i]);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor z = Tensor::zeros({2, 2});
  Tensor prod = matmul(a, z);
  for (double x : *prod.data) CHECK(x == 0.0);
}

TEST_CASE("matmul matches the naive oracle") {
  Rng rng(2);
  Tensor a = rand_tensor({4, 5}, rng);
  Tensor b = rand_tensor({5, 3}, rng);
  CHECK(max_rel_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
}

TEST_CASE("matmul transpose flags agree with explicit transposes") {
  Rng rng(3);
  Tensor a = rand_tensor({4, 6}, rng);
  Tensor b = rand_tensor({6, 5}, rng);
  Tensor at = Tensor::zeros({6, 4});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) at.at(j, i) = a.at(i, j);
  Tensor bt = Tensor::zeros({5, 6});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 5; ++j) bt.at(j, i) = b.at(i, j);
  Tensor ref = naive_matmul(a, b);
  CHECK(max_rel_diff(matmul(at, b, true, false), ref) < 1e-12);
  CHECK(max_rel_diff(matmul(a, bt, false, true), ref) < 1e-12);
  CHECK(max_rel_diff(matmul(at, bt, true, true), ref) < 1e-12);
}

TEST_CASE("matmul associativity on well-conditioned triples") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = rand_tensor({4, 4}, rng);
    Tensor b = rand_tensor({4, 4}, rng);
    Tensor c = rand_tensor({4, 4}, rng);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    for (size_t i = 0; i < left.numel(); ++i) {
      const double denom = std::max(1.0, std::abs((*right.data)[i]));
      CHECK(std::abs((*left.data)[i] - (*right.data)[i]) / denom < 1e-10);
    }
  }
}

TEST_CASE("matmul shape mismatch errors") {
  Rng rng(5);
  Tensor a = rand_tensor({2, 3}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  CHECK_THROWS(matmul(a, b));
}

TEST_CASE("grad of sum is ones; grad of half squared norm is the input") {
  Rng rng(6);
  Tensor p = rand_tensor({3, 4}, rng, true);
  std::vector<Tensor> g1 = grad(sum(p), {p});
  for (double x : *g1[0].data) CHECK(x == 1.0);
  std::vector<Tensor> g2 = grad(scale(sum_sq(p), 0.5), {p});
  for (size_t i = 0; i < p.numel(); ++i) {
    CHECK((*g2[0].data)[i] == doctest::Approx((*p.data)[i]).epsilon(1e-12));
  }
}

TEST_CASE("grad errors: non-scalar loss, param off tape") {
  Rng rng(7);
  Tensor p = rand_tensor({2, 2}, rng, true);
  Tensor q = rand_tensor({2, 2}, rng, true);
  Tensor vecloss = add(p, p);
  CHECK_THROWS(grad(vecloss, {p}));
  Tensor loss = sum(p);
  CHECK_THROWS(grad(loss, {q}));  // q never used
  Tensor leaf = rand_tensor({2, 2}, rng, false);
  Tensor loss2 = sum(mul(p, leaf));
  CHECK_THROWS(grad(loss2, {leaf}));  // not marked trainable
}

TEST_CASE("composite loss passes central finite differences") {
  Rng rng(8);
  Tensor w1 = rand_tensor({6, 5}, rng, true, 0.5);
  Tensor w2 = rand_tensor({5, 4}, rng, true, 0.5);
  Tensor x = rand_tensor({3, 6}, rng);
  Rng wr(9);
  Tensor wts = rand_tensor({3, 4}, wr);
  auto loss_fn = [&]() {
    Tensor h = tanh_t(matmul(x, w1));
    Tensor y = sigmoid_t(matmul(h, w2));
    return cola::testing::weighted_sum(y, wts);
  };
  Rng fd_rng(10);
  auto rep = cola::testing::fd_check(loss_fn, {w1, w2}, 100, fd_rng);
  CHECK(rep.checked == 100);
  CHECK(rep.worst_rel_err < 1e-4);
}

TEST_CASE("softmax_xent uniform equals ln(V)") {
  for (int v : {5, 10, 128}) {
    Tensor logits = Tensor::full({3, v}, 0.7);
    Tensor loss = softmax_xent(logits, {0, 1, v - 1});
    CHECK(std::abs(loss.scalar() - std::log(static_cast<double>(v))) < 1e-12);
  }
}

TEST_CASE("softmax_xent decreases monotonically with the correct-class margin") {
  double prev = 1e300;
  for (double margin : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    Tensor logits = Tensor::zeros({1, 4});
    logits.at(0, 2) = margin;
    const double loss = softmax_xent(logits, {2}).scalar();
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("softmax_xent matches a log-sum-exp oracle") {
  Rng rng(11);
  Tensor logits = rand_tensor({8, 10}, rng, false, 3.0);
  std::vector<int> labels;
  Rng lr(12);
  for (int i = 0; i < 8; ++i) labels.push_back(lr.uniform_int(10));
  double expect = 0.0;
  for (int i = 0; i < 8; ++i) {
    double lse = 0.0;
    for (int j = 0; j < 10; ++j) lse += std::exp(logits.at(i, j));
    expect += std::log(lse) - logits.at(i, labels[i]);
  }
  expect /= 8.0;
  CHECK(std::abs(softmax_xent(logits, labels).scalar() - expect) < 1e-10);
}

TEST_CASE("softmax_xent rejects out-of-range labels") {
  Tensor logits = Tensor::zeros({2, 3});
  CHECK_THROWS(softmax_xent(logits, {0, 3}));
  CHECK_THROWS(softmax_xent(logits, {-1, 0}));
}

TEST_CASE("cosine similarity identities") {
  Rng rng(13);
  Tensor v = rand_tensor({1, 7}, rng);
  CHECK(cosine_similarity(v, v).scalar() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(v, scale(v, -1.0)).scalar() ==
        doctest::Approx(-1.0).epsilon(1e-12));
  Tensor e1 = Tensor::from({1, 2}, {1.0, 0.0});
  Tensor e2 = Tensor::from({1, 2}, {0.0, 1.0});
  CHECK(cosine_similarity(e1, e2).scalar() == 0.0);
  Tensor z = Tensor::zeros({1, 2});
  CHECK_THROWS(cosine_similarity(e1, z));
}

TEST_CASE("every differentiable op passes finite differences") {
  Rng rng(14);
  auto check_unary = [&](const char* name, auto op, std::vector<int> shape) {
    CAPTURE(name);
    Tensor p = rand_tensor(shape, rng, true, 0.8);
    Rng wr = rng.child(name);
    Tensor out_probe = op(p);
    Tensor wts = rand_tensor(out_probe.shape, wr);
    auto loss_fn = [&]() { return cola::testing::weighted_sum(op(p), wts); };
    Rng fd_rng = rng.child("fd");
    cola::testing::fd_check(loss_fn, {p}, 40, fd_rng);
  };
  check_unary("tanh", [](const Tensor& t) { return tanh_t(t); }, {3, 5});
  check_unary("sigmoid", [](const Tensor& t) { return sigmoid_t(t); }, {3, 5});
  check_unary("relu", [](const Tensor& t) { return relu_t(t); }, {3, 5});
  check_unary("rmsnorm", [](const Tensor& t) { return rmsnorm_rows(t); }, {4, 6});
  check_unary("causal_softmax", [](const Tensor& t) { return causal_row_softmax(t); },
              {5, 5});
  check_unary("slice_rows", [](const Tensor& t) { return slice_rows(t, 1, 2); }, {4, 3});
  check_unary("slice_cols", [](const Tensor& t) { return slice_cols(t, 1, 3); }, {4, 5});
  check_unary("row_mean_blocks", [](const Tensor& t) { return row_mean_blocks(t, 2); },
              {6, 3});
  check_unary("gather", [](const Tensor& t) { return gather_rows(t, {0, 2, 2, 1}); },
              {4, 3});

  // binary ops
  Tensor a = rand_tensor({3, 4}, rng, true);
  Tensor b = rand_tensor({3, 4}, rng, true);
  Tensor wts = rand_tensor({3, 4}, rng);
  Rng fd_rng(15);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(add(a, b), wts); }, {a, b}, 30, fd_rng);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(sub(a, b), wts); }, {a, b}, 30, fd_rng);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(mul(a, b), wts); }, {a, b}, 30, fd_rng);

  Tensor v = rand_tensor({1, 4}, rng, true);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(add_rowvec(a, v), wts); }, {a, v}, 30,
      fd_rng);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(scale_cols(a, v), wts); }, {a, v}, 30,
      fd_rng);

  // matmul, all flag combinations
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tensor ma = rand_tensor(ta ? std::vector<int>{5, 3} : std::vector<int>{3, 5}, rng,
                              true, 0.7);
      Tensor mb = rand_tensor(tb ? std::vector<int>{4, 5} : std::vector<int>{5, 4}, rng,
                              true, 0.7);
      Tensor mw = rand_tensor({3, 4}, rng);
      cola::testing::fd_check(
          [&]() { return cola::testing::weighted_sum(matmul(ma, mb, ta, tb), mw); },
          {ma, mb}, 30, fd_rng);
    }
  }

  // scalar reducers and fused losses
  Tensor p = rand_tensor({4, 6}, rng, true);
  cola::testing::fd_check([&]() { return mean(p); }, {p}, 20, fd_rng);
  cola::testing::fd_check([&]() { return sum_sq(p); }, {p}, 20, fd_rng);
  std::vector<int> labels{1, 0, 5, 2};
  cola::testing::fd_check([&]() { return softmax_xent(p, labels); }, {p}, 40, fd_rng);
  Tensor q = rand_tensor({4, 6}, rng, true);
  cola::testing::fd_check([&]() { return cosine_similarity(p, q); }, {p, q}, 40, fd_rng);
}

TEST_CASE("concat ops route gradients to the right parents") {
  Rng rng(16);
  Tensor a = rand_tensor({2, 3}, rng, true);
  Tensor b = rand_tensor({4, 3}, rng, true);
  Tensor wr = rand_tensor({6, 3}, rng);
  Rng fd_rng(17);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(concat_rows({a, b}), wr); }, {a, b}, 30,
      fd_rng);
  Tensor c = rand_tensor({3, 2}, rng, true);
  Tensor d = rand_tensor({3, 5}, rng, true);
  Tensor wc = rand_tensor({3, 7}, rng);
  cola::testing::fd_check(
      [&]() { return cola::testing::weighted_sum(concat_cols({c, d}), wc); }, {c, d}, 30,
      fd_rng);
}

TEST_CASE("mlp jacobian penalty gradient is exact") {
  Rng rng(18);
  Mlp net = Mlp::create({6, 5, 3}, {Act::Tanh, Act::Linear}, rng);
  Tensor x = rand_tensor({1, 6}, rng);
  Rng fd_rng(19);
  // The final linear bias cannot influence the Jacobian, so it is off-tape.
  std::vector<Tensor> params{net.layers()[0].w, net.layers()[0].b, net.layers()[1].w};
  auto rep = cola::testing::fd_check([&]() { return jacobian_penalty(net, x); },
                                     params, 60, fd_rng);
  CHECK(rep.worst_rel_err < 1e-4);
  CHECK_THROWS(grad(jacobian_penalty(net, x), {net.layers()[1].b}));
}

TEST_CASE("adam minimizes a quadratic") {
  Rng rng(20);
  Tensor p = rand_tensor({4, 4}, rng, true, 2.0);
  Adam opt({p}, 0.05);
  for (int i = 0; i < 400; ++i) {
    Tensor loss = sum_sq(p);
    backward(loss);
    opt.step();
  }
  CHECK(sum_sq(p).scalar() < 1e-3);
}

TEST_CASE("checksum detects any weight change") {
  Rng rng(21);
  Tensor a = rand_tensor({4, 4}, rng);
  Tensor b = rand_tensor({2, 2}, rng);
  const uint64_t c0 = checksum({a, b});
  CHECK(checksum({a, b}) == c0);
  (*b.data)[3] += 1e-12;
  CHECK(checksum({a, b}) != c0);
}

TEST_CASE("concurrent no-grad forwards match sequential results") {
  Rng rng(22);
  Mlp net = Mlp::create({8, 16, 4}, {Act::Tanh, Act::Linear}, rng);
  std::vector<Tensor> inputs;
  for (int i = 0; i < 8; ++i) inputs.push_back(rand_tensor({1, 8}, rng));
  std::vector<std::vector<double>> seq(8), par(8);
  {
    NoGradGuard ng;
    for (int i = 0; i < 8; ++i) seq[i] = *net.forward(inputs[i]).data;
  }
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i]() {
      NoGradGuard ng;
      par[i] = *net.forward(inputs[i]).data;
    });
  }
  for (auto& t : threads) t.join();
  for (int i = 0; i < 8; ++i) CHECK(seq[i] == par[i]);
}
