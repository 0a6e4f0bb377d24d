#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "elastic/graph.hpp"
#include "elastic/kernels.hpp"
#include "elastic/rng.hpp"

using namespace elastic;

namespace {

Tensor<double> random_tensor(std::vector<size_t> shape, Rng& rng,
                             double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

// Central-difference check of d(loss)/d(leaf) for a scalar-valued graph.
void check_gradient(const Tensor<double>& x0,
                    const std::function<ag::Var<double>(ag::Var<double>)>& f,
                    double eps = 1e-5, double tol = 1e-6) {
  ag::Var<double> leaf = ag::Var<double>::leaf(x0);
  ag::Var<double> loss = f(leaf);
  REQUIRE(loss.value().size() == 1);
  ag::backward(loss);
  const Tensor<double>& analytic = leaf.grad();

  Tensor<double> x = x0;
  double diff2 = 0, ref2 = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double saved = x.data[i];
    x.data[i] = saved + eps;
    const double up = f(ag::Var<double>::leaf(x)).value().data[0];
    x.data[i] = saved - eps;
    const double down = f(ag::Var<double>::leaf(x)).value().data[0];
    x.data[i] = saved;
    const double fd = (up - down) / (2 * eps);
    diff2 += (analytic.data[i] - fd) * (analytic.data[i] - fd);
    ref2 += fd * fd;
  }
  CHECK(std::sqrt(diff2) / (std::sqrt(ref2) + 1e-12) < tol);
}

}  // namespace

TEST_CASE("softmax closed forms") {
  Tensor<double> x({1, 2}, {std::log(3.0), std::log(1.0)});
  Tensor<double> p = softmax_rows(x);
  CHECK(p.data[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(p.data[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance") {
  Rng rng(3);
  Tensor<double> x = random_tensor({4, 7}, rng, 3.0);
  Tensor<double> shifted = x;
  for (size_t r = 0; r < x.rows(); ++r)
    for (size_t c = 0; c < x.cols(); ++c) shifted.at(r, c) += 100.0 + 3.0 * r;
  Tensor<double> a = softmax_rows(x), b = softmax_rows(shifted);
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and reject non-finite input") {
  Rng rng(4);
  Tensor<double> x = random_tensor({5, 9}, rng, 10.0);
  Tensor<double> p = softmax_rows(x);
  for (size_t r = 0; r < p.rows(); ++r) {
    double s = 0;
    for (size_t c = 0; c < p.cols(); ++c) s += p.at(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  x.data[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(softmax_rows(x), "softmax: non-finite input",
                       std::invalid_argument);
}

TEST_CASE("cross entropy of uniform logits is log V") {
  const size_t v = 11;
  Tensor<double> logits = Tensor<double>::full({3, v}, 0.7);
  CHECK(cross_entropy(logits, {0, 5, 10}) ==
        doctest::Approx(std::log(double(v))).epsilon(1e-12));
}

TEST_CASE("matmul shape errors name both shapes") {
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: shape mismatch [2x3] vs [4x2]",
                       std::invalid_argument);
}

TEST_CASE("layer norm output is normalized") {
  Rng rng(5);
  Tensor<double> x = random_tensor({3, 16}, rng, 2.0);
  Tensor<double> g = Tensor<double>::full({1, 16}, 1.0);
  Tensor<double> b = Tensor<double>::zeros({1, 16});
  Tensor<double> y = layer_norm(x, g, b);
  for (size_t r = 0; r < y.rows(); ++r) {
    double mean = 0, var = 0;
    for (size_t c = 0; c < y.cols(); ++c) mean += y.at(r, c);
    mean /= y.cols();
    for (size_t c = 0; c < y.cols(); ++c)
      var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    var /= y.cols();
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("gradient: matmul") {
  Rng rng(11);
  Tensor<double> x = random_tensor({3, 4}, rng);
  Tensor<double> w = random_tensor({4, 5}, rng);
  check_gradient(x, [&](ag::Var<double> v) {
    return ag::sum(ag::matmul(v, ag::Var<double>::constant(w)));
  });
  check_gradient(w, [&](ag::Var<double> v) {
    return ag::sum(ag::matmul(ag::Var<double>::constant(x), v));
  });
}

TEST_CASE("gradient: matmul_nt") {
  Rng rng(12);
  Tensor<double> a = random_tensor({3, 4}, rng);
  Tensor<double> b = random_tensor({5, 4}, rng);
  check_gradient(a, [&](ag::Var<double> v) {
    return ag::sum(ag::matmul_nt_op(v, ag::Var<double>::constant(b)));
  });
  check_gradient(b, [&](ag::Var<double> v) {
    return ag::sum(ag::matmul_nt_op(ag::Var<double>::constant(a), v));
  });
}

TEST_CASE("gradient: softmax rows") {
  Rng rng(13);
  Tensor<double> x = random_tensor({2, 6}, rng);
  Tensor<double> w = random_tensor({2, 6}, rng);
  check_gradient(x, [&](ag::Var<double> v) {
    return ag::sum(ag::mul(ag::softmax_rows(v), ag::Var<double>::constant(w)));
  });
}

TEST_CASE("gradient: gelu") {
  Rng rng(14);
  Tensor<double> x = random_tensor({3, 5}, rng, 2.0);
  check_gradient(x, [&](ag::Var<double> v) { return ag::sum(ag::gelu(v)); });
}

TEST_CASE("gradient: layer norm") {
  Rng rng(15);
  Tensor<double> x = random_tensor({3, 8}, rng, 2.0);
  Tensor<double> g = random_tensor({1, 8}, rng);
  Tensor<double> b = random_tensor({1, 8}, rng);
  Tensor<double> w = random_tensor({3, 8}, rng);
  auto weighted = [&](ag::Var<double> y) {
    return ag::sum(ag::mul(y, ag::Var<double>::constant(w)));
  };
  check_gradient(x, [&](ag::Var<double> v) {
    return weighted(ag::layer_norm(v, ag::Var<double>::leaf(g),
                                   ag::Var<double>::leaf(b)));
  });
  check_gradient(g, [&](ag::Var<double> v) {
    return weighted(
        ag::layer_norm(ag::Var<double>::leaf(x), v, ag::Var<double>::leaf(b)));
  });
  check_gradient(b, [&](ag::Var<double> v) {
    return weighted(
        ag::layer_norm(ag::Var<double>::leaf(x), ag::Var<double>::leaf(g), v));
  });
}

TEST_CASE("gradient: cross entropy") {
  Rng rng(16);
  Tensor<double> logits = random_tensor({4, 9}, rng, 2.0);
  check_gradient(logits, [&](ag::Var<double> v) {
    return ag::cross_entropy(v, {1, 0, 8, 4});
  });
}

TEST_CASE("gradient: scale_by_entry routes to the gate") {
  Rng rng(17);
  Tensor<double> x = random_tensor({3, 4}, rng);
  Tensor<double> gates = random_tensor({1, 5}, rng);
  check_gradient(gates, [&](ag::Var<double> v) {
    return ag::sum(ag::scale_by_entry(ag::Var<double>::constant(x), v, 2));
  });
  check_gradient(x, [&](ag::Var<double> v) {
    return ag::sum(ag::scale_by_entry(v, ag::Var<double>::constant(gates), 2));
  });
}

TEST_CASE("gradient: slices and concats") {
  Rng rng(18);
  Tensor<double> x = random_tensor({4, 6}, rng);
  check_gradient(x, [&](ag::Var<double> v) {
    auto a = ag::slice_cols(v, 1, 3);
    auto b = ag::slice_rows(v, 0, 2);
    return ag::add(ag::sum(ag::mul(a, a)), ag::sum(ag::mul(b, b)));
  });
  check_gradient(x, [&](ag::Var<double> v) {
    auto joined = ag::concat_cols<double>(
        {ag::slice_cols(v, 0, 2), ag::slice_cols(v, 2, 4)});
    return ag::sum(ag::mul(joined, joined));
  });
}

TEST_CASE("gradient: gather_rows scatter-adds") {
  Rng rng(19);
  Tensor<double> table = random_tensor({6, 3}, rng);
  check_gradient(table, [&](ag::Var<double> v) {
    auto g = ag::gather_rows(v, {0, 2, 2, 5});
    return ag::sum(ag::mul(g, g));
  });
}

TEST_CASE("gradient: sigmoid and relu") {
  Rng rng(20);
  Tensor<double> x = random_tensor({2, 7}, rng, 2.0);
  check_gradient(x, [&](ag::Var<double> v) {
    return ag::sum(ag::sigmoid(v));
  });
  // keep relu inputs away from the kink
  for (double& v : x.data)
    if (std::abs(v) < 0.1) v = 0.5;
  check_gradient(x, [&](ag::Var<double> v) { return ag::sum(ag::relu(v)); });
}

TEST_CASE("backward demands a scalar loss") {
  auto leaf = ag::Var<double>::leaf(Tensor<double>::zeros({2, 2}));
  CHECK_THROWS_AS(ag::backward(leaf), std::invalid_argument);
}

TEST_CASE("rng determinism and gumbel shape") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  // Gumbel mean is the Euler-Mascheroni constant.
  Rng g(7);
  double mean = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) mean += g.gumbel() / n;
  CHECK(mean == doctest::Approx(0.5772).epsilon(0.02));
}
