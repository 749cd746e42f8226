// Reference implementations used only by tests. Each one is written with a
// different algorithm / accumulation order than the production kernels so a
// shared bug cannot hide: agreement within tolerance is evidence, not
// tautology.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace fuselm::test {

// Frozen high-precision constants, computed once with an arbitrary-precision
// evaluator (mpmath, 25 significant digits) and pasted verbatim.
//
// softmax(1.0, 2.0, 3.0):
inline constexpr double kSoftmax123_0 = 0.0900305731703804579980221;
inline constexpr double kSoftmax123_1 = 0.2447284710547976524729596;
inline constexpr double kSoftmax123_2 = 0.6652409557748218895290183;
// cross-entropy of the single logit row [0.5, -1.25, 2.0, 0.25], target 0:
inline constexpr double kCeRow4Target0 = 1.86163742842083963638643;

// Plain triple loop (i, j, k) — production uses an (i, k, j) accumulation.
inline std::vector<double> matmul_ijk(std::span<const double> a, int64_t ra,
                                      int64_t ca, std::span<const double> b,
                                      int64_t cb) {
  std::vector<double> c(static_cast<size_t>(ra * cb), 0.0);
  for (int64_t i = 0; i < ra; ++i) {
    for (int64_t j = 0; j < cb; ++j) {
      long double acc = 0.0L;
      for (int64_t k = 0; k < ca; ++k) {
        acc += static_cast<long double>(a[static_cast<size_t>(i * ca + k)]) *
               static_cast<long double>(b[static_cast<size_t>(k * cb + j)]);
      }
      c[static_cast<size_t>(i * cb + j)] = static_cast<double>(acc);
    }
  }
  return c;
}

// Direct log-sum-exp per row; the production kernel normalizes probabilities
// first. Returns the masked mean.
inline double cross_entropy_lse(std::span<const double> logits, int64_t rows,
                                int64_t cols, std::span<const int> targets,
                                std::span<const uint8_t> mask) {
  long double total = 0.0L;
  int64_t counted = 0;
  for (int64_t t = 0; t < rows; ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    const double* row = logits.data() + t * cols;
    long double mx = row[0];
    for (int64_t v = 1; v < cols; ++v) mx = std::max<long double>(mx, row[v]);
    long double se = 0.0L;
    for (int64_t v = 0; v < cols; ++v) se += expl(row[v] - mx);
    const long double lse = mx + logl(se);
    total += lse - row[targets[static_cast<size_t>(t)]];
    ++counted;
  }
  return static_cast<double>(total / static_cast<long double>(counted));
}

// Row softmax in long double, written as two plain passes.
inline std::vector<double> softmax_row(std::span<const double> row) {
  long double mx = row[0];
  for (double x : row) mx = std::max<long double>(mx, x);
  long double denom = 0.0L;
  for (double x : row) denom += expl(x - mx);
  std::vector<double> out(row.size());
  for (size_t i = 0; i < row.size(); ++i) {
    out[i] = static_cast<double>(expl(row[i] - mx) / denom);
  }
  return out;
}

// Two-layer scorer evaluated scalar-by-scalar: relu(h W1 + b1) W2 + b2.
inline double gate_score_direct(std::span<const double> h,
                                std::span<const double> w1,
                                std::span<const double> b1,
                                std::span<const double> w2, double b2) {
  const size_t d = h.size();
  const size_t dh = b1.size();
  long double score = b2;
  for (size_t j = 0; j < dh; ++j) {
    long double pre = b1[j];
    for (size_t i = 0; i < d; ++i) pre += static_cast<long double>(h[i]) * w1[i * dh + j];
    if (pre > 0.0L) score += pre * static_cast<long double>(w2[j]);
  }
  return static_cast<double>(score);
}

// Scalar-loop mixture with the specialist axis innermost (production
// accumulates with the specialist axis outermost).
inline std::vector<double> weighted_mix_scalar(
    std::span<const double> weights, int64_t rows, int64_t num_parts,
    std::span<const std::span<const double>> parts, int64_t cols) {
  std::vector<double> out(static_cast<size_t>(rows * cols), 0.0);
  for (int64_t t = 0; t < rows; ++t) {
    for (int64_t v = 0; v < cols; ++v) {
      long double acc = 0.0L;
      for (int64_t s = 0; s < num_parts; ++s) {
        acc += static_cast<long double>(weights[static_cast<size_t>(t * num_parts + s)]) *
               static_cast<long double>(parts[static_cast<size_t>(s)][static_cast<size_t>(t * cols + v)]);
      }
      out[static_cast<size_t>(t * cols + v)] = static_cast<double>(acc);
    }
  }
  return out;
}

// One scalar AdamW update, straight from the published recurrence.
struct AdamScalar {
  double m = 0.0, v = 0.0;
  int64_t t = 0;

  double update(double param, double g, double lr, double beta1, double beta2,
                double eps, double weight_decay) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return param - lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * param);
  }
};

}  // namespace fuselm::test
