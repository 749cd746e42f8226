#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "fuselm/error.hpp"
#include "fuselm/ops.hpp"
#include "fuselm/rng.hpp"
#include "fuselm/tensor.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace fuselm;
namespace ft = fuselm::test;

TEST_CASE("matmul: identity passes values through") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {2, 3, 4, 5});
  Tensor out = matmul(eye, m);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(out.at(i, j) == m.at(i, j));
}

TEST_CASE("matmul: hand-computable 1x1") {
  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  CHECK(matmul(a, b).at(0, 0) == 11.0);
}

TEST_CASE("matmul: random 5x7 by 7x3 matches the triple-loop oracle") {
  Rng rng(2024);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor a = Tensor::randn({5, 7}, rng, 2.0);
    Tensor b = Tensor::randn({7, 3}, rng, 2.0);
    Tensor c = matmul(a, b);
    const auto expect = ft::matmul_ijk(a.values(), 5, 7, b.values(), 3);
    for (int64_t i = 0; i < c.numel(); ++i) {
      CHECK(c.values()[static_cast<size_t>(i)] ==
            doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})),
                  DimensionError);
}

TEST_CASE("softmax: symmetric input gives uniform rows") {
  Tensor z = Tensor::zeros({2, 3});
  Tensor s = softmax(z, 1);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(s.at(i, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax: stable under large magnitudes") {
  Tensor x = Tensor::from_values({1, 3}, {1000.0, 0.0, 0.0});
  Tensor s = softmax(x, 1);
  CHECK(std::isfinite(s.at(0, 0)));
  CHECK(s.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.at(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax: (1,2,3) matches the frozen high-precision oracle") {
  Tensor x = Tensor::from_values({1, 3}, {1.0, 2.0, 3.0});
  Tensor s = softmax(x, 1);
  CHECK(std::fabs(s.at(0, 0) - ft::kSoftmax123_0) < 1e-9);
  CHECK(std::fabs(s.at(0, 1) - ft::kSoftmax123_1) < 1e-9);
  CHECK(std::fabs(s.at(0, 2) - ft::kSoftmax123_2) < 1e-9);
}

TEST_CASE("softmax: simplex and shift-invariance on 1000 random inputs") {
  Rng rng(555);
  for (int rep = 0; rep < 1000; ++rep) {
    const int64_t cols = rng.next_int(2, 9);
    Tensor x = Tensor::randn({1, cols}, rng, 10.0);
    Tensor s = softmax(x, 1);
    double total = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      CHECK(s.at(0, j) >= 0.0);
      total += s.at(0, j);
    }
    CHECK(std::fabs(total - 1.0) <= 1e-6);

    const double c = (rng.next_double() - 0.5) * 200.0;
    std::vector<double> shifted(x.values().begin(), x.values().end());
    for (double& v : shifted) v += c;
    Tensor s2 = softmax(Tensor::from_values({1, cols}, std::move(shifted)), 1);
    for (int64_t j = 0; j < cols; ++j) {
      CHECK(std::fabs(s2.at(0, j) - s.at(0, j)) <= 1e-9);
    }
  }
}

TEST_CASE("softmax: non-finite input raises NumericError") {
  Tensor x = Tensor::from_values({1, 2}, {std::nan(""), 1.0});
  CHECK_THROWS_AS(softmax(x, 1), NumericError);
}

TEST_CASE("cross_entropy: uniform logits give ln V exactly up to 1e-9") {
  const int64_t kV = 4;
  Tensor logits = Tensor::zeros({3, kV});
  std::vector<int> targets = {0, 2, 3};
  std::vector<uint8_t> mask = {1, 1, 1};
  Tensor loss = cross_entropy(logits, targets, mask);
  CHECK(std::fabs(loss.scalar_value() - std::log(4.0)) < 1e-9);
}

TEST_CASE("cross_entropy: dominant correct logit drives loss to zero") {
  Tensor logits = Tensor::from_values({1, 3}, {100.0, 0.0, 0.0});
  std::vector<int> targets = {0};
  std::vector<uint8_t> mask = {1};
  CHECK(cross_entropy(logits, targets, mask).scalar_value() ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross_entropy: frozen single-row oracle value") {
  Tensor logits = Tensor::from_values({1, 4}, {0.5, -1.25, 2.0, 0.25});
  std::vector<int> targets = {0};
  std::vector<uint8_t> mask = {1};
  CHECK(std::fabs(cross_entropy(logits, targets, mask).scalar_value() -
                  ft::kCeRow4Target0) < 1e-12);
}

TEST_CASE("cross_entropy: random 6x8 matches the log-sum-exp oracle") {
  Rng rng(808);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor logits = Tensor::randn({6, 8}, rng, 3.0);
    std::vector<int> targets(6);
    std::vector<uint8_t> mask(6);
    int live = 0;
    for (int t = 0; t < 6; ++t) {
      targets[static_cast<size_t>(t)] = static_cast<int>(rng.next_int(0, 7));
      mask[static_cast<size_t>(t)] = rng.next_double() < 0.7 ? 1 : 0;
      live += mask[static_cast<size_t>(t)];
    }
    if (live == 0) mask[0] = 1;
    const double expect =
        ft::cross_entropy_lse(logits.values(), 6, 8, targets, mask);
    CHECK(std::fabs(cross_entropy(logits, targets, mask).scalar_value() -
                    expect) < 1e-9);
  }
}

TEST_CASE("cross_entropy: masked positions carry exactly zero gradient") {
  Rng rng(99);
  Tensor logits = Tensor::randn({4, 5}, rng, 1.0, true);
  std::vector<int> targets = {1, 2, 3, 4};
  std::vector<uint8_t> mask = {1, 0, 1, 0};
  backward(cross_entropy(logits, targets, mask));
  const auto g = logits.grad();
  for (int64_t v = 0; v < 5; ++v) {
    CHECK(g[static_cast<size_t>(1 * 5 + v)] == 0.0);
    CHECK(g[static_cast<size_t>(3 * 5 + v)] == 0.0);
  }
  // Counted rows must have gradients summing to ~0 (softmax minus one-hot).
  double row0 = 0.0;
  for (int64_t v = 0; v < 5; ++v) row0 += g[static_cast<size_t>(v)];
  CHECK(std::fabs(row0) < 1e-12);
}

TEST_CASE("cross_entropy: empty mask and bad targets are rejected") {
  Tensor logits = Tensor::zeros({2, 3});
  std::vector<int> targets = {0, 1};
  std::vector<uint8_t> none = {0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, targets, none), EmptyLossError);
  std::vector<int> bad = {0, 3};
  std::vector<uint8_t> all = {1, 1};
  CHECK_THROWS_AS(cross_entropy(logits, bad, all), VocabError);
}

TEST_CASE("embedding_lookup: gathers rows and scatter-adds gradients") {
  Tensor table = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<int> ids = {2, 0, 2};
  Tensor rows = embedding_lookup(table, ids);
  CHECK(rows.at(0, 0) == 5.0);
  CHECK(rows.at(1, 0) == 1.0);
  backward(sum(rows));
  const auto g = table.grad();
  CHECK(g[0] == 1.0);  // row 0 gathered once
  CHECK(g[2] == 0.0);  // row 1 never gathered
  CHECK(g[4] == 2.0);  // row 2 gathered twice
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(embedding_lookup(table, bad), VocabError);
}

TEST_CASE("relu/add/mul/scale: elementwise semantics") {
  Tensor x = Tensor::from_values({4}, {-1.0, 0.0, 2.0, -3.0});
  Tensor r = relu(x);
  CHECK(r.at(0) == 0.0);
  CHECK(r.at(2) == 2.0);
  Tensor bias = Tensor::from_values({2}, {10.0, 20.0});
  Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor rb = add(m, bias);  // row broadcast
  CHECK(rb.at(0, 0) == 11.0);
  CHECK(rb.at(1, 1) == 24.0);
  CHECK(scale(x, -2.0).at(3) == 6.0);
}

TEST_CASE("rmsnorm: unit-gain rows have unit rms") {
  Rng rng(31);
  Tensor x = Tensor::randn({3, 8}, rng, 5.0);
  Tensor w = Tensor::full({8}, 1.0);
  Tensor y = rmsnorm(x, w);
  for (int i = 0; i < 3; ++i) {
    double ss = 0.0;
    for (int j = 0; j < 8; ++j) ss += y.at(i, j) * y.at(i, j);
    CHECK(std::sqrt(ss / 8.0) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("causal_self_attention: masked probabilities are exactly zero") {
  // With V the identity basis, the output at position t reveals the attention
  // distribution over 0..t; future positions must get exactly zero.
  const int64_t kT = 4;
  Rng rng(17);
  Tensor q = Tensor::randn({kT, 4}, rng, 1.0);
  Tensor k = Tensor::randn({kT, 4}, rng, 1.0);
  Tensor v = Tensor::from_values({kT, 4}, {1, 0, 0, 0,
                                           0, 1, 0, 0,
                                           0, 0, 1, 0,
                                           0, 0, 0, 1});
  Tensor out = causal_self_attention(q, k, v, 1);
  for (int64_t t = 0; t < kT; ++t) {
    double row = 0.0;
    for (int64_t j = 0; j < kT; ++j) {
      const double a = out.at(t, j);
      if (j > t) CHECK(a == 0.0);
      CHECK(a >= 0.0);
      row += a;
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Position 0 can only attend to itself.
  CHECK(out.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("concat_scores and weighted_mix: scalar-loop oracle, 100 cases") {
  Rng rng(404);
  for (int rep = 0; rep < 100; ++rep) {
    const int64_t kT = rng.next_int(1, 6);
    const int64_t kV = rng.next_int(2, 9);
    const int64_t kS = rng.next_int(2, 4);
    Tensor w = softmax(Tensor::randn({kT, kS}, rng, 2.0), 1);
    std::vector<Tensor> parts;
    std::vector<std::span<const double>> part_views;
    for (int64_t s = 0; s < kS; ++s) parts.push_back(Tensor::randn({kT, kV}, rng, 3.0));
    for (const Tensor& p : parts) part_views.push_back(p.values());
    Tensor mixed = weighted_mix(w, parts);
    const auto expect = ft::weighted_mix_scalar(w.values(), kT, kS, part_views, kV);
    REQUIRE(mixed.numel() == static_cast<int64_t>(expect.size()));
    for (size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::fabs(mixed.values()[i] - expect[i]) < 1e-9);
    }
  }
}

TEST_CASE("ops: per-op gradients agree with central finite differences") {
  Rng rng(606);

  auto check = [&](const char* label, const std::function<Tensor()>& fwd,
                   const ParamRefs& leaves) {
    ft::FdReport rep = ft::fd_check(fwd, leaves, 1e-4, 10);
    INFO(label << " worst " << rep.worst_rel << " at " << rep.worst_at);
    CHECK(rep.worst_rel <= 1e-4);
  };

  {
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
    check("matmul", [&] { return sum(mul(matmul(a, b), matmul(a, b))); },
          {{"a", a}, {"b", b}});
  }
  {
    Tensor x = Tensor::randn({2, 5}, rng, 2.0, true);
    std::vector<int> targets = {1, 4};
    std::vector<uint8_t> mask = {1, 1};
    check("softmax+ce", [&] { return cross_entropy(x, targets, mask); },
          {{"x", x}});
  }
  {
    Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
    Tensor w = Tensor::full({6}, 1.0, true);
    std::vector<int> targets = {2, 0, 5};
    std::vector<uint8_t> mask = {1, 0, 1};
    check("rmsnorm", [&] { return cross_entropy(rmsnorm(x, w), targets, mask); },
          {{"x", x}, {"w", w}});
  }
  {
    Tensor q = Tensor::randn({4, 6}, rng, 0.7, true);
    Tensor k = Tensor::randn({4, 6}, rng, 0.7, true);
    Tensor v = Tensor::randn({4, 6}, rng, 0.7, true);
    std::vector<int> targets = {0, 3, 1, 5};
    std::vector<uint8_t> mask = {1, 1, 1, 1};
    check("attention",
          [&] {
            return cross_entropy(causal_self_attention(q, k, v, 2), targets, mask);
          },
          {{"q", q}, {"k", k}, {"v", v}});
  }
  {
    Tensor x = Tensor::randn({3, 4}, rng, 1.5, true);
    Tensor bias = Tensor::randn({4}, rng, 0.5, true);
    std::vector<int> targets = {1, 2, 0};
    std::vector<uint8_t> mask = {1, 1, 1};
    check("relu+bias",
          [&] { return cross_entropy(relu(add(x, bias)), targets, mask); },
          {{"x", x}, {"bias", bias}});
  }
  {
    Tensor table = Tensor::randn({5, 4}, rng, 1.0, true);
    std::vector<int> ids = {4, 1, 4};
    std::vector<int> targets = {0, 1, 2};
    std::vector<uint8_t> mask = {1, 1, 1};
    check("embedding",
          [&] { return cross_entropy(embedding_lookup(table, ids), targets, mask); },
          {{"table", table}});
  }
  {
    // Through the full gate-shaped pipeline: scores -> softmax -> mixture.
    Tensor s0 = Tensor::randn({3, 1}, rng, 1.0, true);
    Tensor s1 = Tensor::randn({3, 1}, rng, 1.0, true);
    Tensor p0 = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor p1 = Tensor::randn({3, 4}, rng, 1.0, true);
    std::vector<int> targets = {3, 0, 2};
    std::vector<uint8_t> mask = {1, 1, 1};
    check("mix",
          [&] {
            std::vector<Tensor> cols = {s0, s1};
            Tensor w = softmax(concat_scores(cols), 1);
            std::vector<Tensor> parts = {p0, p1};
            return cross_entropy(weighted_mix(w, parts), targets, mask);
          },
          {{"s0", s0}, {"s1", s1}, {"p0", p0}, {"p1", p1}});
  }
}

TEST_CASE("ops: bitwise deterministic across repeated evaluation") {
  Rng rng(9001);
  Tensor a = Tensor::randn({8, 8}, rng, 1.0);
  Tensor b = Tensor::randn({8, 8}, rng, 1.0);
  Tensor c1 = matmul(a, b);
  Tensor c2 = matmul(a, b);
  CHECK(ft::checksum_tensor(c1) == ft::checksum_tensor(c2));
  Tensor s1 = softmax(c1, 1);
  Tensor s2 = softmax(c2, 1);
  CHECK(ft::checksum_tensor(s1) == ft::checksum_tensor(s2));
}
