#include <doctest.h>

#include <cmath>
#include <vector>

#include "attnlab/rng.hpp"
#include "attnlab/tensor.hpp"
#include "test_helpers.hpp"

using namespace attnlab;
using namespace attnlab::testing;

TEST_CASE("matmul identity and projector") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(max_abs_diff(matmul(eye, m).values(), m.values()) == 0.0);

  Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor n = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor out = matmul(proj, n);
  CHECK(out.values()[0] == 5.0);
  CHECK(out.values()[1] == 6.0);
  CHECK(out.values()[2] == 0.0);
  CHECK(out.values()[3] == 0.0);
}

TEST_CASE("matmul against triple-loop oracle") {
  Rng rng(101);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor out = matmul(a, b);

  std::vector<double> expect(3 * 2, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 4; ++k)
        expect[i * 2 + j] += a.values()[i * 4 + k] * b.values()[k * 2 + j];
  CHECK(max_abs_diff(out.values(), expect) <= 1e-12);
}

TEST_CASE("matmul shape errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("softmax uniform input") {
  Tensor x = Tensor::zeros({3});
  Tensor y = softmax_rows(x);
  for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax shift invariance and row sums") {
  Rng rng(7);
  Tensor x = random_tensor({5, 6}, rng);
  Tensor shifted = Tensor::from_data({5, 6}, [&] {
    std::vector<double> v(x.values().begin(), x.values().end());
    for (double& e : v) e += 17.25;
    return v;
  }());
  CHECK(max_abs_diff(softmax_rows(x).values(), softmax_rows(shifted).values()) <= 1e-12);

  Tensor y = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double total = 0.0;
    for (int j = 0; j < 6; ++j) total += y.values()[r * 6 + j];
    CHECK(std::fabs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax against extended-precision evaluation") {
  Tensor y = softmax_rows(Tensor::from_data({3}, {1, 2, 3}));
  long double denom = expl(1.0L) + expl(2.0L) + expl(3.0L);
  for (int i = 0; i < 3; ++i) {
    const double expect = static_cast<double>(expl(static_cast<long double>(i + 1)) / denom);
    CHECK(y.values()[static_cast<std::size_t>(i)] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("layer_norm constant slice collapses to beta") {
  Tensor x = Tensor::full({4}, 5.0);
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  Tensor y = layer_norm(x, gamma, beta, 1e-12);
  for (double v : y.values()) CHECK(std::fabs(v) <= 1e-12);

  Tensor beta2 = Tensor::full({4}, 3.5);
  Tensor y2 = layer_norm(x, Tensor::zeros({4}), beta2, 1e-12);
  for (double v : y2.values()) CHECK(v == 3.5);
}

TEST_CASE("layer_norm against direct formula") {
  Rng rng(23);
  Tensor x = random_tensor({2, 8}, rng);
  Tensor gamma = random_tensor({8}, rng);
  Tensor beta = random_tensor({8}, rng);
  const double eps = 1e-12;
  Tensor y = layer_norm(x, gamma, beta, eps);

  std::vector<double> expect(16);
  for (int r = 0; r < 2; ++r) {
    long double mean = 0.0L;
    for (int j = 0; j < 8; ++j) mean += x.values()[r * 8 + j];
    mean /= 8.0L;
    long double var = 0.0L;
    for (int j = 0; j < 8; ++j) {
      const long double d = x.values()[r * 8 + j] - mean;
      var += d * d;
    }
    var /= 8.0L;
    for (int j = 0; j < 8; ++j) {
      const long double xhat = (x.values()[r * 8 + j] - mean) / sqrtl(var + eps);
      expect[r * 8 + j] = static_cast<double>(gamma.values()[j] * xhat + beta.values()[j]);
    }
  }
  CHECK(max_abs_diff(y.values(), expect) <= 1e-10);
}

TEST_CASE("gelu fixed points") {
  CHECK(gelu(Tensor::scalar_value(0.0)).item() == 0.0);
  CHECK(std::fabs(gelu(Tensor::scalar_value(10.0)).item() - 10.0) <= 1e-6);
  const double phi_one = 0.5 * (1.0 + static_cast<double>(erfl(1.0L / sqrtl(2.0L))));
  CHECK(gelu(Tensor::scalar_value(1.0)).item() == doctest::Approx(phi_one).epsilon(1e-14));
}

TEST_CASE("cross entropy fixed cases") {
  // uniform logits over V=4, a single labeled position
  Tensor logits = Tensor::zeros({1, 2, 4});
  IntTensor labels({1, 2}, {2, -1});
  CHECK(cross_entropy_masked(logits, labels).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));

  // a huge logit on the true class drives the loss to zero
  Tensor sharp = Tensor::zeros({1, 1, 4});
  sharp.values_mut()[1] = 1e9;
  CHECK(cross_entropy_masked(sharp, IntTensor({1, 1}, {1})).item() <= 1e-12);
}

TEST_CASE("cross entropy against per-position oracle") {
  Rng rng(31);
  Tensor logits = random_tensor({1, 2, 3}, rng);
  IntTensor labels({1, 2}, {2, 0});
  const double got = cross_entropy_masked(logits, labels).item();

  long double total = 0.0L;
  for (int pos = 0; pos < 2; ++pos) {
    long double denom = 0.0L;
    for (int j = 0; j < 3; ++j) denom += expl(static_cast<long double>(logits.values()[pos * 3 + j]));
    const int lbl = labels.data[static_cast<std::size_t>(pos)];
    const long double p = expl(static_cast<long double>(logits.values()[pos * 3 + lbl])) / denom;
    total += -logl(p);
  }
  CHECK(got == doctest::Approx(static_cast<double>(total / 2.0L)).epsilon(1e-10));
}

TEST_CASE("cross entropy rejects an all-ignored batch") {
  Tensor logits = Tensor::zeros({1, 2, 4});
  CHECK_THROWS_AS(cross_entropy_masked(logits, IntTensor({1, 2}, {-1, -1})), std::runtime_error);
}

TEST_CASE("cross entropy validates label range") {
  Tensor logits = Tensor::zeros({1, 2, 4});
  CHECK_THROWS_AS(cross_entropy_masked(logits, IntTensor({1, 2}, {0, 4})), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy_masked(logits, IntTensor({1, 2}, {-2, 1})), std::out_of_range);
}

TEST_CASE("backward on reductions") {
  Rng rng(5);
  Tensor x = random_tensor({3, 4}, rng, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = random_tensor({6}, rng, true);
  backward(sum(mul(y, y)));
  for (int i = 0; i < 6; ++i) {
    CHECK(y.grad()[static_cast<std::size_t>(i)] ==
          doctest::Approx(2.0 * y.values()[static_cast<std::size_t>(i)]).epsilon(1e-14));
  }
}

TEST_CASE("backward errors") {
  Rng rng(5);
  Tensor x = random_tensor({3}, rng, true);
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);  // non-scalar

  Tensor detached = random_tensor({}, rng, false);
  CHECK_THROWS_AS(backward(detached), std::invalid_argument);

  Tensor loss = sum(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::runtime_error);  // second pass without reset
}

TEST_CASE("backward through a shared subgraph accumulates only at leaves") {
  Rng rng(71);
  Tensor x = random_tensor({5}, rng, true);
  Tensor shared = mul(x, x);  // d/dx = 2x per loss that consumes it

  Tensor loss_a = sum(shared);
  backward(loss_a);
  std::vector<double> after_one(x.grad().begin(), x.grad().end());

  Tensor loss_b = scale(sum(shared), 3.0);
  backward(loss_b);  // reuses the recorded subgraph; leaf grads accumulate
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(x.grad()[i] == doctest::Approx(4.0 * after_one[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(13);
  const double alpha = 1.7, beta = -0.6;
  std::vector<double> base(12);
  for (double& v : base) v = rng.uniform(-2.0, 2.0);

  auto f = [](const Tensor& t) { return sum(mul(t, t)); };
  auto g = [](const Tensor& t) { return sum(gelu(t)); };

  Tensor x1 = Tensor::from_data({12}, base, true);
  backward(add(scale(f(x1), alpha), scale(g(x1), beta)));

  Tensor x2 = Tensor::from_data({12}, base, true);
  backward(f(x2));
  Tensor x3 = Tensor::from_data({12}, base, true);
  backward(g(x3));

  for (std::size_t i = 0; i < base.size(); ++i) {
    const double combined = alpha * x2.grad()[i] + beta * x3.grad()[i];
    CHECK(std::fabs(x1.grad()[i] - combined) <= 1e-10);
  }
}

TEST_CASE("finite differences fixed cases") {
  Tensor x = Tensor::from_data({4}, {0.3, -1.2, 0.9, 2.0});
  Tensor fd = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x, 1e-4);
  for (double v : fd.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-10));

  Tensor x0 = Tensor::from_data({1}, {3.0});
  Tensor fd2 = finite_diff_grad(
      [](const Tensor& t) { return t.values()[0] * t.values()[0]; }, x0, 1e-4);
  CHECK(std::fabs(fd2.values()[0] - 6.0) <= 1e-7);

  CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x0, 0.0),
                  std::invalid_argument);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(2024);

  auto weighted = [&](const Tensor& out) {
    // fixed random cotangent so the check exercises non-uniform adjoints
    Rng wrng(99);
    Tensor w = Tensor::uniform(out.shape(), wrng, -1.0, 1.0);
    return sum(mul(out, w));
  };

  SUBCASE("matmul") {
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted(matmul(in[0], in[1])); },
        {random_tensor({3, 4}, rng, true), random_tensor({4, 5}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("matmul_nt") {
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted(matmul_nt(in[0], in[1])); },
        {random_tensor({3, 4}, rng, true), random_tensor({5, 4}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("add_bias") {
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted(add_bias(in[0], in[1])); },
        {random_tensor({2, 3, 4}, rng, true), random_tensor({4}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("gelu") {
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted(gelu(in[0])); },
        {random_tensor({3, 5}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("softmax_rows") {
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted(softmax_rows(in[0])); },
        {random_tensor({4, 6}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("layer_norm") {
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) {
          return weighted(layer_norm(in[0], in[1], in[2], 1e-12));
        },
        {random_tensor({3, 6}, rng, true), random_tensor({6}, rng, true),
         random_tensor({6}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("embedding_rows") {
    IntTensor ids({2, 3}, {0, 2, 1, 2, 2, 0});
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted(embedding_rows(in[0], ids)); },
        {random_tensor({3, 4}, rng, true)});
    CHECK(err <= 1e-4);
  }
  SUBCASE("cross_entropy_masked") {
    IntTensor labels({2, 3}, {1, -1, 4, 0, 2, -1});
    const double err = grad_check(
        [&](const std::vector<Tensor>& in) { return cross_entropy_masked(in[0], labels); },
        {random_tensor({2, 3, 5}, rng, true)});
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("finite differences agree with backward on a random MLP") {
  Rng rng(404);
  Tensor x = random_tensor({2, 6}, rng);
  Tensor w1 = random_tensor({6, 8}, rng, true);
  Tensor b1 = random_tensor({8}, rng, true);
  Tensor w2 = random_tensor({8, 3}, rng, true);

  auto build = [&](const std::vector<Tensor>& in) {
    return sum(matmul(gelu(add_bias(matmul(x, in[0]), in[1])), in[2]));
  };
  CHECK(grad_check(build, {w1, b1, w2}) <= 1e-4);
}

TEST_CASE("forward ops stay finite and deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({4, 8}, rng);
    Tensor w = random_tensor({8, 8}, rng);
    Tensor g = random_tensor({8}, rng);
    Tensor b = random_tensor({8}, rng);
    Tensor y = softmax_rows(layer_norm(gelu(matmul(x, w)), g, b, 1e-12));
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  const auto a = run(77);
  const auto b = run(77);
  CHECK(bit_identical(a, b));
  for (double v : a) CHECK(std::isfinite(v));
}

TEST_CASE("dropout identity at zero and mask structure otherwise") {
  Rng rng(55);
  Tensor x = random_tensor({4, 4}, rng);
  Rng drop_rng(1);
  Tensor same = dropout(x, 0.0, drop_rng);
  CHECK(same.same_storage(x));

  Rng drop_rng2(1);
  Tensor dropped = dropout(x, 0.5, drop_rng2);
  for (std::size_t i = 0; i < dropped.numel(); ++i) {
    const double v = dropped.values()[i];
    CHECK((v == 0.0 || v == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-14)));
  }
}

TEST_CASE("embedding_rows rejects out-of-range ids") {
  Tensor table = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(embedding_rows(table, IntTensor({2}, {1, 4})), std::out_of_range);
  CHECK_THROWS_AS(embedding_rows(table, IntTensor({1}, {-1})), std::out_of_range);
}
