#pragma once

#include <cstdint>
#include <span>

#include "fuselm/tensor.hpp"

namespace fuselm {

// Two-layer ReLU scorer shared across specialists: every specialist's hidden
// state is pushed through the same parameters, producing one scalar per token
// per specialist. Softmax over specialists then yields mixing weights.
//
// w1 starts small-random; b1, w2 and b2 start at zero, so initial scores are
// exactly zero for every input and the initial mixture is exactly uniform.
class GateNetwork {
 public:
  static GateNetwork init(int d_model, int d_hidden, uint64_t seed);

  // [T,d_model] -> [T,1]: relu(h*w1 + b1)*w2 + b2.
  Tensor score(const Tensor& hidden) const;

  ParamRefs named_params() const;
  int d_model() const { return static_cast<int>(w1.dim(0)); }
  int d_hidden() const { return static_cast<int>(w1.dim(1)); }

  Tensor w1;  // [d_model, d_hidden]
  Tensor b1;  // [d_hidden]
  Tensor w2;  // [d_hidden, 1]
  Tensor b2;  // [1]
};

// Row softmax over specialist scores [T,S] -> mixing weights [T,S].
// Each row sums to 1 and the map is invariant to adding a constant to a row.
Tensor fuse_weights(const Tensor& scores);

// Convex combination of per-specialist logits under the given weights:
// out[t,:] = sum_s weights[t,s] * logits[s][t,:]. Operates on logits, not
// probabilities; the fused distribution comes from one final softmax.
Tensor fuse_logits(const Tensor& weights, std::span<const Tensor> specialist_logits);

}  // namespace fuselm
