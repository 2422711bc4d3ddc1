#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "psat/errors.hpp"
#include "psat/rng.hpp"
#include "psat/tensor.hpp"

using namespace psat;
using testsupport::gradcheck_rel_err;
using testsupport::random_tensor;

namespace {

// Reference matrix product, plain triple loop.
std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                               size_t m, size_t k, size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      for (size_t l = 0; l < k; ++l) c[i * n + j] += a[i * k + l] * b[l * n + j];
  return c;
}

// Reference convolution, six nested loops, zero padding.
std::vector<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w, size_t stride,
                             size_t pad, size_t& ho_out, size_t& wo_out) {
  const size_t n = x.extent(0), ci = x.extent(1), h = x.extent(2), ww = x.extent(3);
  const size_t co = w.extent(0), k = w.extent(2);
  const size_t ho = (h + 2 * pad - k) / stride + 1;
  const size_t wo = (ww + 2 * pad - k) / stride + 1;
  ho_out = ho;
  wo_out = wo;
  std::vector<double> y(n * co * ho * wo, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t c = 0; c < co; ++c)
      for (size_t oh = 0; oh < ho; ++oh)
        for (size_t ow = 0; ow < wo; ++ow) {
          double acc = 0.0;
          for (size_t q = 0; q < ci; ++q)
            for (size_t kh = 0; kh < k; ++kh)
              for (size_t kw = 0; kw < k; ++kw) {
                const long ih = long(oh * stride + kh) - long(pad);
                const long iw = long(ow * stride + kw) - long(pad);
                if (ih < 0 || iw < 0 || ih >= long(h) || iw >= long(ww)) continue;
                acc += x.values()[((i * ci + q) * h + ih) * ww + iw] *
                       w.values()[((c * ci + q) * k + kh) * k + kw];
              }
          y[((i * co + c) * ho + oh) * wo + ow] = acc;
        }
  return y;
}

// Cross entropy built only from explicit exp/sum/log arithmetic.
double ce_ref(const std::vector<double>& logits, const std::vector<int>& labels, size_t n,
              size_t c) {
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (size_t j = 0; j < c; ++j) denom += std::exp(logits[i * c + j]);
    total += -std::log(std::exp(logits[i * c + labels[i]]) / denom);
  }
  return total / double(n);
}

Tensor<double> away_from_zero(Tensor<double> t, double margin = 5e-3) {
  for (double& v : t.values())
    if (std::fabs(v) < margin) v = v < 0 ? v - margin : v + margin;
  return t;
}

// Pool inputs need every in-window pair separated, so the finite-difference
// step cannot cross an argmax boundary.
Tensor<double> separated(std::vector<size_t> shape, RandomStream& rs) {
  while (true) {
    Tensor<double> t = random_tensor(shape, rs);
    std::vector<double> s = t.values();
    std::sort(s.begin(), s.end());
    bool ok = true;
    for (size_t i = 1; i < s.size(); ++i) ok = ok && (s[i] - s[i - 1] > 1e-3);
    if (ok) return t;
  }
}

}  // namespace

TEST_CASE("matmul identity, pinned product, annihilator") {
  Tensor<double> eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  Tensor<double> b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(eye, b).values() == b.values());

  Tensor<double> a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(a, b).values() == std::vector<double>{19, 22, 43, 50});
  CHECK(matmul(a, b).values() == matmul_ref(a.values(), b.values(), 2, 2, 2));

  Tensor<double> z = Tensor<double>::zeros({2, 3});
  Tensor<double> az = matmul(a, z);
  for (double v : az.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul matches the triple-loop reference on random shapes") {
  RandomStream rs(11);
  for (int trial = 0; trial < 20; ++trial) {
    const size_t m = 1 + size_t(rs.uniform() * 6), k = 1 + size_t(rs.uniform() * 6),
                 n = 1 + size_t(rs.uniform() * 6);
    Tensor<double> a = random_tensor({m, k}, rs);
    Tensor<double> b = random_tensor({k, n}, rs);
    std::vector<double> want = matmul_ref(a.values(), b.values(), m, k, n);
    std::vector<double> got = matmul(a, b).values();
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(std::fabs(got[i] - want[i]) <= 1e-12 * std::max(1.0, std::fabs(want[i])));
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("conv2d constant field and identity kernel") {
  Tensor<double> x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  Tensor<double> w = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  Tensor<double> y = conv2d(x, w, 1, 0);
  CHECK(y.shape() == std::vector<size_t>{1, 1, 2, 2});
  for (double v : y.values()) CHECK(v == 4.0);

  RandomStream rs(3);
  Tensor<double> xr = random_tensor({1, 1, 3, 3}, rs);
  Tensor<double> one = Tensor<double>::full({1, 1, 1, 1}, 1.0);
  CHECK(conv2d(xr, one, 1, 0).values() == xr.values());
}

TEST_CASE("conv2d pinned random case equals the six-loop reference") {
  RandomStream rs(17);
  Tensor<double> x = random_tensor({2, 3, 5, 5}, rs);
  Tensor<double> w = random_tensor({4, 3, 3, 3}, rs);
  size_t ho = 0, wo = 0;
  std::vector<double> want = conv_ref(x, w, 2, 1, ho, wo);
  Tensor<double> y = conv2d(x, w, 2, 1);
  CHECK(y.shape() == std::vector<size_t>{2, 4, ho, wo});
  CHECK(y.values() == want);
}

TEST_CASE("conv2d equals the six-loop reference exactly for extents up to 8") {
  RandomStream rs(23);
  for (int trial = 0; trial < 40; ++trial) {
    const size_t n = 1 + size_t(rs.uniform() * 3), ci = 1 + size_t(rs.uniform() * 8),
                 co = 1 + size_t(rs.uniform() * 8);
    const size_t k = 1 + size_t(rs.uniform() * 4);
    const size_t pad = size_t(rs.uniform() * 3), stride = 1 + size_t(rs.uniform() * 3);
    const size_t lo = k > 2 * pad ? k - 2 * pad : 1;
    const size_t h = std::min<size_t>(8, lo + size_t(rs.uniform() * 5));
    const size_t w_ = std::min<size_t>(8, lo + size_t(rs.uniform() * 5));
    Tensor<double> x = random_tensor({n, ci, h, w_}, rs);
    Tensor<double> w = random_tensor({co, ci, k, k}, rs);
    size_t ho = 0, wo = 0;
    std::vector<double> want = conv_ref(x, w, stride, pad, ho, wo);
    CHECK(conv2d(x, w, stride, pad).values() == want);
  }
}

TEST_CASE("conv2d rejects a kernel larger than the padded input") {
  Tensor<double> x = Tensor<double>::zeros({1, 1, 2, 2});
  Tensor<double> w = Tensor<double>::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, 1, 0), ShapeError);
}

TEST_CASE("cross_entropy pinned values") {
  Tensor<double> uniform = Tensor<double>::zeros({1, 10});
  CHECK(cross_entropy(uniform, {3}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  Tensor<double> sat = Tensor<double>::from({1, 3}, {40.0, 0.0, 0.0});
  CHECK(cross_entropy(sat, {0}).item() < 1e-6);

  RandomStream rs(5);
  Tensor<double> logits = random_tensor({4, 3}, rs, -2, 2);
  std::vector<int> labels = {0, 2, 1, 1};
  const double want = ce_ref(logits.values(), labels, 4, 3);
  CHECK(cross_entropy(logits, labels).item() == doctest::Approx(want).epsilon(1e-12));
  CHECK(cross_entropy(logits, labels).item() >= 0.0);
}

TEST_CASE("cross_entropy rejects an out-of-range label") {
  Tensor<double> logits = Tensor<double>::zeros({2, 3});
  CHECK_THROWS_AS(cross_entropy(logits, {0, 3}), IndexError);
  CHECK_THROWS_AS(cross_entropy(logits, {-1, 0}), IndexError);
}

TEST_CASE("softmax rows sum to one") {
  RandomStream rs(7);
  Tensor<double> x = random_tensor({6, 5}, rs, -4, 4);
  Tensor<double> p = softmax_rows(x);
  for (size_t i = 0; i < 6; ++i) {
    double s = 0;
    for (size_t j = 0; j < 5; ++j) s += p.values()[i * 5 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("backward on a quadratic, a constant, and a reused tensor") {
  Tensor<double> x = Tensor<double>::from({3}, {1, -2, 3}, true);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad() == std::vector<double>{2, -4, 6});

  Tensor<double> untouched = Tensor<double>::from({2}, {1, 1}, true);
  Tensor<double> c = Tensor<double>::from({2}, {3, 4}, true);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(sum(c));
  }
  CHECK_FALSE(untouched.has_grad());

  // Two uses of the same tensor accumulate additively.
  Tensor<double> y = Tensor<double>::from({2}, {2, 5}, true);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(sum(add(y, y)));
  }
  CHECK(y.grad() == std::vector<double>{2, 2});
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tensor<double> x = Tensor<double>::from({2}, {1, 2}, true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  Tensor<double> y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("ops never mutate their inputs") {
  RandomStream rs(29);
  Tensor<double> a = random_tensor({2, 3, 4, 4}, rs);
  Tensor<double> w = random_tensor({4, 3, 3, 3}, rs);
  const std::vector<double> a0 = a.values(), w0 = w.values();
  conv2d(a, w, 1, 1);
  maxpool2d(a, 2, 2);
  avgpool2d(a, 2, 2);
  relu(a);
  scale(a, -2.5);
  CHECK(a.values() == a0);
  CHECK(w.values() == w0);

  Tensor<double> m = random_tensor({3, 5}, rs);
  const std::vector<double> m0 = m.values();
  softmax_rows(m);
  cross_entropy(m, {0, 1, 2});
  CHECK(m.values() == m0);
}

// ---------------------------------------------------------------------------
// finite-difference gradient trials, every differentiable op

TEST_CASE("gradients match central finite differences on randomized instances") {
  RandomStream rs(101);
  int trials = 0;
  auto run = [&](const char* op, const testsupport::ScalarFn& f,
                 std::vector<Tensor<double>> inputs) {
    const double err = gradcheck_rel_err(f, std::move(inputs));
    INFO("op: " << std::string(op));
    CHECK(err < 1e-6);
    ++trials;
  };
  // Weighted sums make the scalar sensitive to every output coordinate.
  auto wsum = [](const Tensor<double>& t, const Tensor<double>& wt) {
    return sum(mul(reshape(t, {t.numel()}), wt));
  };

  for (int t = 0; t < 8; ++t) {
    const size_t n = 2 + size_t(rs.uniform() * 3);
    Tensor<double> wt = random_tensor({n * n}, rs);
    run("add", [&](const std::vector<Tensor<double>>& in) {
      return wsum(add(in[0], in[1]), wt);
    }, {random_tensor({n, n}, rs), random_tensor({n, n}, rs)});
    run("sub", [&](const std::vector<Tensor<double>>& in) {
      return wsum(sub(in[0], in[1]), wt);
    }, {random_tensor({n, n}, rs), random_tensor({n, n}, rs)});
    run("mul", [&](const std::vector<Tensor<double>>& in) {
      return wsum(mul(in[0], in[1]), wt);
    }, {random_tensor({n, n}, rs), random_tensor({n, n}, rs)});
    run("scale", [&](const std::vector<Tensor<double>>& in) {
      return wsum(scale(in[0], -1.7), wt);
    }, {random_tensor({n, n}, rs)});
    run("relu", [&](const std::vector<Tensor<double>>& in) {
      return wsum(relu(in[0]), wt);
    }, {away_from_zero(random_tensor({n, n}, rs))});
    run("reshape_sum", [&](const std::vector<Tensor<double>>& in) {
      return sum(reshape(in[0], {n * n}));
    }, {random_tensor({n, n}, rs)});
    run("rsqrt_shift", [&](const std::vector<Tensor<double>>& in) {
      return wsum(rsqrt_shift(in[0], 1e-5), wt);
    }, {random_tensor({n, n}, rs, 0.5, 2.0)});
    run("log_elem", [&](const std::vector<Tensor<double>>& in) {
      return wsum(log_elem(in[0]), wt);
    }, {random_tensor({n, n}, rs, 0.5, 2.0)});
  }

  for (int t = 0; t < 8; ++t) {
    const size_t m = 2 + size_t(rs.uniform() * 3), k = 2 + size_t(rs.uniform() * 3),
                 n = 2 + size_t(rs.uniform() * 3);
    Tensor<double> wt = random_tensor({m * n}, rs);
    run("matmul", [&](const std::vector<Tensor<double>>& in) {
      return wsum(matmul(in[0], in[1]), wt);
    }, {random_tensor({m, k}, rs), random_tensor({k, n}, rs)});
    run("linear", [&](const std::vector<Tensor<double>>& in) {
      return wsum(linear(in[0], in[1], in[2]), wt);
    }, {random_tensor({m, k}, rs), random_tensor({n, k}, rs), random_tensor({n}, rs)});
    run("add_rowvec", [&](const std::vector<Tensor<double>>& in) {
      return wsum(add_rowvec(in[0], in[1]), wt);
    }, {random_tensor({m, n}, rs), random_tensor({n}, rs)});
    run("softmax_rows", [&](const std::vector<Tensor<double>>& in) {
      return wsum(softmax_rows(in[0]), wt);
    }, {random_tensor({m, n}, rs, -2, 2)});
  }

  for (int t = 0; t < 8; ++t) {
    const size_t n = 1 + size_t(rs.uniform() * 2), ci = 1 + size_t(rs.uniform() * 3),
                 co = 1 + size_t(rs.uniform() * 3);
    const size_t h = 4 + size_t(rs.uniform() * 3);
    Tensor<double> x = random_tensor({n, ci, h, h}, rs);
    Tensor<double> w = random_tensor({co, ci, 3, 3}, rs);
    const size_t ho = (h + 2 - 3) / 1 + 1;
    Tensor<double> wt = random_tensor({n * co * ho * ho}, rs);
    run("conv2d", [&](const std::vector<Tensor<double>>& in) {
      return wsum(conv2d(in[0], in[1], 1, 1), wt);
    }, {x, w});
  }

  for (int t = 0; t < 8; ++t) {
    const size_t n = 1 + size_t(rs.uniform() * 2), c = 1 + size_t(rs.uniform() * 3);
    Tensor<double> x = separated({n, c, 4, 4}, rs);
    Tensor<double> wt = random_tensor({n * c * 2 * 2}, rs);
    run("maxpool2d", [&](const std::vector<Tensor<double>>& in) {
      return wsum(maxpool2d(in[0], 2, 2), wt);
    }, {x});
    run("avgpool2d", [&](const std::vector<Tensor<double>>& in) {
      return wsum(avgpool2d(in[0], 2, 2), wt);
    }, {random_tensor({n, c, 4, 4}, rs)});
  }

  for (int t = 0; t < 8; ++t) {
    const size_t n = 1 + size_t(rs.uniform() * 2), c = 2 + size_t(rs.uniform() * 3);
    Tensor<double> wtc = random_tensor({c}, rs);
    Tensor<double> wtx = random_tensor({n * c * 3 * 3}, rs);
    run("add_channel", [&](const std::vector<Tensor<double>>& in) {
      return wsum(add_channel(in[0], in[1]), wtx);
    }, {random_tensor({n, c, 3, 3}, rs), random_tensor({c}, rs)});
    run("mul_channel", [&](const std::vector<Tensor<double>>& in) {
      return wsum(mul_channel(in[0], in[1]), wtx);
    }, {random_tensor({n, c, 3, 3}, rs), random_tensor({c}, rs)});
    run("channel_mean", [&](const std::vector<Tensor<double>>& in) {
      return sum(mul(channel_mean(in[0]), in[1]));
    }, {random_tensor({n, c, 3, 3}, rs), wtc});
  }

  for (int t = 0; t < 8; ++t) {
    const size_t n = 2 + size_t(rs.uniform() * 3), c = 2 + size_t(rs.uniform() * 3);
    std::vector<int> labels(n);
    for (size_t i = 0; i < n; ++i) labels[i] = int(rs.uniform() * double(c));
    run("cross_entropy", [&](const std::vector<Tensor<double>>& in) {
      return cross_entropy(in[0], labels);
    }, {random_tensor({n, c}, rs, -2, 2)});
    run("ce_per_example", [&](const std::vector<Tensor<double>>& in) {
      return sum(ce_per_example(in[0], labels));
    }, {random_tensor({n, c}, rs, -2, 2)});
    run("nll_per_example", [&](const std::vector<Tensor<double>>& in) {
      return sum(nll_per_example(softmax_rows(in[0]), labels));
    }, {random_tensor({n, c}, rs, -2, 2)});
  }

  for (int t = 0; t < 4; ++t) {
    const size_t cu = 2, ku = 3, bo = 1 + size_t(rs.uniform() * 2), bi = 1 + size_t(rs.uniform() * 2);
    const size_t cout = bo * cu, cin = bi * cu;
    Tensor<double> units = random_tensor({bo * bi, cu * cu * ku * ku}, rs);
    Tensor<double> wt = random_tensor({cout * cin * ku * ku}, rs);
    run("assemble_units", [&](const std::vector<Tensor<double>>& in) {
      return wsum(assemble_units(in[0], cout, cin, cu, ku), wt);
    }, {units});
    Tensor<double> w = random_tensor({2, 2, 3, 3}, rs);
    Tensor<double> wt1 = random_tensor({2 * 2 * 1 * 1}, rs);
    run("kernel_reduce_mean", [&](const std::vector<Tensor<double>>& in) {
      return wsum(kernel_reduce(in[0], KernelReduce::mean), wt1);
    }, {w});
    run("kernel_reduce_sum", [&](const std::vector<Tensor<double>>& in) {
      return wsum(kernel_reduce(in[0], KernelReduce::sum), wt1);
    }, {w});
    run("kernel_reduce_max", [&](const std::vector<Tensor<double>>& in) {
      return wsum(kernel_reduce(in[0], KernelReduce::max), wt1);
    }, {separated({2, 2, 3, 3}, rs)});
  }

  CHECK(trials >= 100);
}
