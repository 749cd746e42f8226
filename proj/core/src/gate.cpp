#include "fuselm/gate.hpp"

#include "fuselm/error.hpp"
#include "fuselm/ops.hpp"
#include "fuselm/rng.hpp"

namespace fuselm {

GateNetwork GateNetwork::init(int d_model, int d_hidden, uint64_t seed) {
  if (d_model <= 0 || d_hidden <= 0) {
    throw ConfigError("gate dimensions must be positive");
  }
  Rng rng(derive_seed(seed, "gate"));
  GateNetwork g;
  g.w1 = Tensor::randn({d_model, d_hidden}, rng, 0.02, true);
  g.b1 = Tensor::zeros({d_hidden}, true);
  g.w2 = Tensor::zeros({d_hidden, 1}, true);
  g.b2 = Tensor::zeros({1}, true);
  return g;
}

Tensor GateNetwork::score(const Tensor& hidden) const {
  if (!hidden.defined() || hidden.rank() != 2 || hidden.dim(1) != w1.dim(0)) {
    throw DimensionError("gate score: expected [T," + std::to_string(w1.dim(0)) +
                         "] input");
  }
  return add(matmul(relu(add(matmul(hidden, w1), b1)), w2), b2);
}

ParamRefs GateNetwork::named_params() const {
  return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
}

Tensor fuse_weights(const Tensor& scores) {
  if (!scores.defined() || scores.rank() != 2) {
    throw DimensionError("fuse_weights: expected a [T,S] score matrix");
  }
  // softmax validates finiteness and carries the shift-invariant max-
  // subtraction form.
  return softmax(scores, 1);
}

Tensor fuse_logits(const Tensor& weights, std::span<const Tensor> specialist_logits) {
  return weighted_mix(weights, specialist_logits);
}

}  // namespace fuselm
