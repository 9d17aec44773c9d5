#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "gradcheck.hpp"
#include "tloc/rng.hpp"
#include "tloc/tensor.hpp"

using namespace tloc;
using namespace tloc::ad;
using tloc::testing::grad_check;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Weighted sum with fixed random weights, so every output element matters.
Tensor probe(const Tensor& y, std::uint64_t seed = 11) {
  Rng rng(seed, "probe");
  return sum(mul(y, random_tensor(y.shape(), rng, false)));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("matmul examples") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.at({0, 0}) == 19);
  CHECK(c.at({0, 1}) == 22);
  CHECK(c.at({1, 0}) == 43);
  CHECK(c.at({1, 1}) == 50);

  Rng rng(1);
  Tensor x = random_tensor({5, 3}, rng, false);
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor y = matmul(x, eye);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), std::invalid_argument);
  try {
    matmul(a, Tensor::zeros({3, 2}));
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("[2×2]") != std::string::npos);
    CHECK(std::string(e.what()).find("[3×2]") != std::string::npos);
  }
}

TEST_CASE("matmul agrees with a naive triple loop at awkward sizes") {
  Rng rng(2);
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{{1, 1, 1}, {7, 300, 19}, {33, 5, 65}, {9, 513, 17}}) {
    Tensor a = random_tensor({m, k}, rng, false);
    Tensor b = random_tensor({k, n}, rng, false);
    Tensor c = matmul(a, b);
    double worst = 0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a.data()[i * k + p] * b.data()[p * n + j];
        worst = std::max(worst, std::abs(s - c.data()[i * n + j]));
      }
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("matmul and linear gradients") {
  Rng rng(3);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({6, 5}, rng);
  CHECK(grad_check([&] { return sum(matmul(a, b)); }, {a, b}) < kTol);
  CHECK(grad_check([&] { return probe(matmul(a, b)); }, {a, b}) < kTol);
  Tensor bias = random_tensor({5}, rng);
  CHECK(grad_check([&] { return probe(linear(a, b, bias)); }, {a, b, bias}) < kTol);
  CHECK(grad_check([&] { return probe(transpose(a)); }, {a}) < kTol);

  // Closed form: d sum(a·b)/da = 1·bᵀ.
  a.zero_grad();
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t p = 0; p < 6; ++p) {
      double row = 0;
      for (std::size_t j = 0; j < 5; ++j) row += b.data()[p * 5 + j];
      CHECK(std::abs(a.grad()[i * 6 + p] - row) < 1e-12);
    }
  }
}

TEST_CASE("softmax") {
  Tensor u = softmax(Tensor::from({1, 3}, {2.5, 2.5, 2.5}), 1);
  for (double p : u.data()) CHECK(std::abs(p - 1.0 / 3) < 1e-15);
  Tensor two = softmax(Tensor::from({2}, {0.0, std::log(3.0)}), 0);
  CHECK(std::abs(two.data()[0] - 0.25) < 1e-12);
  CHECK(std::abs(two.data()[1] - 0.75) < 1e-12);

  Rng rng(4);
  Tensor x = random_tensor({6, 9}, rng, true, 5.0);
  Tensor s = softmax(x, 1);
  Tensor t = softmax(shift(x, 7.0), 1);
  for (std::size_t i = 0; i < 6; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      const double p = s.data()[i * 9 + j];
      CHECK(p > 0.0);
      CHECK(p < 1.0);
      CHECK(std::abs(p - t.data()[i * 9 + j]) < 1e-12);
      row += p;
    }
    CHECK(std::abs(row - 1.0) < 1e-12);
  }
  // Large logits stay finite.
  Tensor big = softmax(Tensor::from({3}, {1000.0, 999.0, -1000.0}), 0);
  CHECK(std::isfinite(big.data()[0]));
  CHECK(grad_check([&] { return probe(softmax(x, 1)); }, {x}) < kTol);
  CHECK(grad_check([&] { return probe(softmax(x, 0)); }, {x}) < kTol);
}

TEST_CASE("layer_norm") {
  Tensor ones = Tensor::full({4}, 1.0);
  Tensor zeros = Tensor::zeros({4});
  Tensor c = layer_norm(Tensor::full({2, 4}, 3.7), ones, zeros);
  for (double v : c.data()) CHECK(v == 0.0);

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor pair = layer_norm(Tensor::from({2}, {1, 3}), g2, b2, 1e-15);
  CHECK(std::abs(pair.data()[0] + 1.0) < 1e-12);
  CHECK(std::abs(pair.data()[1] - 1.0) < 1e-12);
  CHECK_THROWS_AS(layer_norm(Tensor::from({2, 1}, {1, 2}), Tensor::full({1}, 1.0), Tensor::zeros({1})),
                  std::invalid_argument);

  Rng rng(5);
  Tensor x = random_tensor({5, 8}, rng, true, 3.0);
  Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (std::size_t i = 0; i < 5; ++i) {
    double m = 0;
    for (std::size_t j = 0; j < 8; ++j) m += y.data()[i * 8 + j];
    CHECK(std::abs(m / 8) < 1e-10);
  }
  Tensor gain = random_tensor({8}, rng);
  Tensor bias = random_tensor({8}, rng);
  CHECK(grad_check([&] { return probe(layer_norm(x, gain, bias)); }, {x, gain, bias}) < kTol);
}

TEST_CASE("gelu") {
  Tensor y = gelu(Tensor::from({3}, {0.0, 1.0, 10.0}));
  CHECK(y.data()[0] == 0.0);
  CHECK(std::abs(y.data()[1] - 0.841345) < 1e-6);
  CHECK(std::abs(y.data()[1] - 0.5 * (1 + std::erf(1 / std::sqrt(2.0)))) < 1e-15);
  CHECK(std::abs(y.data()[2] - 10.0) < 1e-6);
  Rng rng(6);
  Tensor x = random_tensor({3, 7}, rng, true, 2.0);
  CHECK(grad_check([&] { return probe(gelu(x)); }, {x}) < kTol);
}

TEST_CASE("cross_entropy") {
  const std::vector<std::int32_t> t0{0};
  CHECK(cross_entropy(Tensor::from({1, 3}, {60, 0, 0}), t0).item() < 1e-20);
  const std::vector<std::int32_t> t{1, 4, 0};
  CHECK(std::abs(cross_entropy(Tensor::full({3, 5}, 0.3), t).item() - std::log(5.0)) < 1e-12);

  Rng rng(7);
  Tensor logits = random_tensor({1, 6}, rng);
  const std::vector<std::int32_t> t3{3};
  backward(cross_entropy(logits, t3));
  double z = 0;
  for (double v : logits.data()) z += std::exp(v);
  for (std::size_t j = 0; j < 6; ++j) {
    const double p = std::exp(logits.data()[j]) / z;
    CHECK(std::abs(logits.grad()[j] - (p - (j == 3 ? 1.0 : 0.0))) < 1e-10);
  }
  Tensor batch = random_tensor({4, 6}, rng);
  const std::vector<std::int32_t> tb{0, 5, 2, 2};
  CHECK(grad_check([&] { return cross_entropy(batch, tb); }, {batch}) < kTol);
  const std::vector<std::int32_t> bad{6};
  CHECK_THROWS_AS(cross_entropy(logits, bad), std::invalid_argument);
  const std::vector<std::int32_t> neg{-1};
  CHECK_THROWS_AS(cross_entropy(logits, neg), std::invalid_argument);
}

TEST_CASE("backward") {
  Tensor x = Tensor::from({4}, {1, -2, 3.5, 0}, true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2 * x.data()[i]);

  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor b = Tensor::from({2}, {3, 4}, true);
  Tensor la = sum(scale(a, 3));
  Tensor lb = sum(scale(b, 5));
  backward(la);
  CHECK(a.grad()[0] == 3);
  CHECK(b.grad()[0] == 0);
  CHECK(b.grad()[1] == 0);
  CHECK_THROWS_AS(backward(scale(a, 2)), std::invalid_argument);

  // Diamond: x feeds two paths that rejoin; each node visited once.
  Tensor d = Tensor::from({3}, {0.5, 1.5, -1}, true);
  Tensor e = add(scale(d, 2), mul(d, d));
  backward(sum(e));
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(d.grad()[i] - (2 + 2 * d.data()[i])) < 1e-15);
}

TEST_CASE("NoGradGuard stops recording") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    y = scale(x, 2);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("remaining ops: values and gradients") {
  Rng rng(8);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor row = random_tensor({4}, rng);
  Tensor s = random_tensor({3}, rng);

  Tensor ab = add(a, row);
  CHECK(ab.at({2, 1}) == a.at({2, 1}) + row.at({1}));
  CHECK_THROWS_AS(add(a, Tensor::zeros({3})), std::invalid_argument);
  CHECK(grad_check([&] { return probe(add(a, b)); }, {a, b}) < kTol);
  CHECK(grad_check([&] { return probe(add(a, row)); }, {a, row}) < kTol);
  CHECK(grad_check([&] { return probe(mul(a, b)); }, {a, b}) < kTol);
  CHECK(grad_check([&] { return probe(scale(a, -2.5)); }, {a}) < kTol);
  CHECK(grad_check([&] { return probe(shift(a, 4.0)); }, {a}) < kTol);
  CHECK(grad_check([&] { return probe(row_scale(a, s)); }, {a, s}) < kTol);
  CHECK(grad_check([&] { return mean(mul(a, a)); }, {a}) < kTol);
  CHECK(std::abs(mean(Tensor::from({4}, {1, 2, 3, 6})).item() - 3.0) < 1e-15);

  Tensor r = reshape(a, {2, 6});
  CHECK(r.shape() == Shape{2, 6});
  CHECK_THROWS_AS(reshape(a, {5}), std::invalid_argument);
  CHECK(grad_check([&] { return probe(reshape(a, {12})); }, {a}) < kTol);

  Tensor c0 = concat({a, b}, 0);
  CHECK(c0.shape() == Shape{6, 4});
  CHECK(c0.at({4, 2}) == b.at({1, 2}));
  Tensor c1 = concat({a, b}, 1);
  CHECK(c1.shape() == Shape{3, 8});
  CHECK(c1.at({1, 5}) == b.at({1, 1}));
  CHECK(grad_check([&] { return probe(concat({a, b, a}, 1)); }, {a, b}) < kTol);
  CHECK_THROWS_AS(concat({a, Tensor::zeros({2, 3})}, 0), std::invalid_argument);

  Tensor sl = slice(a, 1, 1, 2);
  CHECK(sl.shape() == Shape{3, 2});
  CHECK(sl.at({2, 0}) == a.at({2, 1}));
  CHECK_THROWS_AS(slice(a, 1, 3, 2), std::invalid_argument);
  CHECK(grad_check([&] { return probe(slice(a, 0, 1, 2)); }, {a}) < kTol);

  const std::vector<std::size_t> rows{2, 0, 2};
  Tensor sel = select_rows(a, rows);
  CHECK(sel.at({0, 3}) == a.at({2, 3}));
  CHECK(grad_check([&] { return probe(select_rows(a, rows)); }, {a}) < kTol);

  const std::vector<std::size_t> rep{1};
  Tensor repl = random_tensor({1, 4}, rng);
  Tensor rr = replace_rows(a, rep, repl);
  CHECK(rr.at({1, 2}) == repl.at({0, 2}));
  CHECK(rr.at({0, 2}) == a.at({0, 2}));
  CHECK(grad_check([&] { return probe(replace_rows(a, rep, repl)); }, {a, repl}) < kTol);
  const std::vector<std::size_t> dup{1, 1};
  CHECK_THROWS_AS(replace_rows(a, dup, concat({repl, repl}, 0)), std::invalid_argument);

  Tensor table = random_tensor({5, 3}, rng);
  const std::vector<std::int32_t> ids{4, 0, 4, 2};
  Tensor emb = embedding(table, ids);
  CHECK(emb.shape() == Shape{4, 3});
  CHECK(emb.at({2, 1}) == table.at({4, 1}));
  CHECK(grad_check([&] { return probe(embedding(table, ids)); }, {table}) < kTol);
  const std::vector<std::int32_t> oob{5};
  CHECK_THROWS_AS(embedding(table, oob), std::invalid_argument);
}

TEST_CASE("self_attention") {
  // One head, C=2, q=k=0, v=x: uniform attention, every row is the token mean.
  const std::size_t T = 4;
  std::vector<double> qkv(T * 6, 0.0);
  const double xs[T][2] = {{1, 2}, {3, -1}, {0, 0}, {-4, 7}};
  for (std::size_t t = 0; t < T; ++t) {
    qkv[t * 6 + 4] = xs[t][0];
    qkv[t * 6 + 5] = xs[t][1];
  }
  std::vector<double> probs;
  Tensor out = self_attention(Tensor::from({T, 6}, qkv), 1, 1, &probs);
  for (std::size_t t = 0; t < T; ++t) {
    CHECK(std::abs(out.at({t, 0}) - 0.0) < 1e-15);
    CHECK(std::abs(out.at({t, 1}) - 2.0) < 1e-15);
  }
  REQUIRE(probs.size() == T * T);
  for (double p : probs) CHECK(std::abs(p - 0.25) < 1e-15);

  Rng rng(9);
  const std::size_t batch = 2, heads = 2, C = 4, L = 3;
  Tensor x = random_tensor({batch * L, 3 * C}, rng);
  std::vector<double> pr;
  Tensor y = self_attention(x, batch, heads, &pr);
  CHECK(y.shape() == Shape{batch * L, C});
  REQUIRE(pr.size() == batch * heads * L * L);
  for (std::size_t r = 0; r < batch * heads * L; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < L; ++j) s += pr[r * L + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK(grad_check([&] { return probe(self_attention(x, batch, heads)); }, {x}) < kTol);
  CHECK_THROWS_AS(self_attention(x, 4, heads), std::invalid_argument);
  CHECK_THROWS_AS(self_attention(x, batch, 3), std::invalid_argument);

  // Sequences in a batch do not see each other.
  Tensor first = slice(x, 0, 0, L);
  Tensor alone = self_attention(first, 1, heads);
  for (std::size_t i = 0; i < alone.numel(); ++i) CHECK(alone.data()[i] == y.data()[i]);
}

TEST_CASE("forward determinism is bitwise") {
  Rng r1(10), r2(10);
  Tensor a = random_tensor({17, 40}, r1, false);
  Tensor b = random_tensor({40, 23}, r1, false);
  Tensor a2 = random_tensor({17, 40}, r2, false);
  Tensor b2 = random_tensor({40, 23}, r2, false);
  Tensor y1 = softmax(gelu(matmul(a, b)), 1);
  Tensor y2 = softmax(gelu(matmul(a2, b2)), 1);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
  // A row computed alone matches the same row inside a larger product.
  Tensor one = matmul(slice(a, 0, 5, 1), b);
  for (std::size_t j = 0; j < 23; ++j) CHECK(one.data()[j] == matmul(a, b).at({5, j}));
}
