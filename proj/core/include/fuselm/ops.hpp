#pragma once

#include <span>
#include <vector>

#include "fuselm/tensor.hpp"

namespace fuselm {

// All operations validate shapes (DimensionError) and record themselves on
// the autodiff tape unless a NoGradGuard is active or no input requires grad.
// Kernels are plain loops with a fixed accumulation order, so results are
// bit-identical run to run and machine to machine (same FP environment).

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise sum. Also accepts a rank-1 `b` of length n against a rank-2
// `a` of shape [m,n] (row broadcast, the bias case).
Tensor add(const Tensor& a, const Tensor& b);

// Elementwise product, same shapes only.
Tensor mul(const Tensor& a, const Tensor& b);

// a * c for a scalar constant c.
Tensor scale(const Tensor& a, double c);

Tensor relu(const Tensor& a);

// Sum of all entries -> scalar tensor.
Tensor sum(const Tensor& a);

// Softmax along `axis` (negative axes count from the back). Uses the
// max-subtraction form; rejects non-finite inputs with NumericError.
Tensor softmax(const Tensor& a, int axis = -1);

// Mean negative log-likelihood over masked-in positions.
//   logits: [T,V]; targets: T ids in [0,V); mask: T flags (nonzero = counted).
// Masked-out positions contribute exactly zero loss and zero gradient.
// Throws EmptyLossError when the mask selects nothing, VocabError on a
// masked-in target outside [0,V).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> mask);

// Row gather: table [N,d], ids of length T with each id in [0,N) -> [T,d].
// Gradient scatters additively into the gathered rows (repeats accumulate).
// Serves both embedding tables and position gathers.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Row-wise RMS normalization with learned gain: x [T,d], weight [d].
//   y[t,j] = x[t,j] / rms(x[t,:]) * weight[j],  rms = sqrt(mean(x^2) + eps)
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps = 1e-6);

// Fused causal multi-head self-attention on already-projected q,k,v [T,d].
// d must divide by n_heads. Future positions are excluded via a large
// negative score constant before the row softmax, so masked probabilities
// underflow to exactly zero and no gradient crosses the causal boundary.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             int n_heads);
inline constexpr double kCausalMaskValue = -1e30;

// Stacks S column vectors [T,1] into [T,S], preserving order.
Tensor concat_scores(std::span<const Tensor> columns);

// Row-wise weighted sum of S equally-shaped [T,V] matrices with weights
// [T,S]: out[t,:] = sum_s w[t,s] * parts[s][t,:].
Tensor weighted_mix(const Tensor& weights, std::span<const Tensor> parts);

}  // namespace fuselm
