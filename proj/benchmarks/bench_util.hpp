// Shared model builders for the microbenchmarks.
#pragma once

#include <vector>

#include "fuselm/fuser.hpp"
#include "fuselm/rng.hpp"

namespace fuselm::bench {

inline LmConfig model_config(int d_model = 128, int n_layers = 4) {
  LmConfig c;
  c.vocab_size = Tokenizer().vocab_size();
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = 4;
  c.max_seq_len = 256;
  return c;
}

// Deterministic nondegenerate weights (the default init has a zero head,
// which would let the zero-skip kernels flatter the numbers).
inline void randomize(ParamRefs params, uint64_t seed) {
  Rng rng(derive_seed(seed, "bench-params"));
  for (NamedParam& p : params) {
    const bool is_norm = p.name.find("norm") != std::string::npos;
    for (double& x : p.tensor.mutable_values()) {
      x = is_norm ? 1.0 : 0.05 * rng.next_normal();
    }
  }
}

// Committee with the first `num_specialists` domains.
inline FusedModel make_model(int num_specialists, const LmConfig& cfg) {
  const auto templates = builtin_templates();
  std::vector<Specialist> specs;
  for (int s = 0; s < num_specialists; ++s) {
    specs.push_back(Specialist::init(cfg, kAllDomains[static_cast<size_t>(s)],
                                     templates[static_cast<size_t>(s)],
                                     1000 + static_cast<uint64_t>(s)));
    randomize(specs.back().named_params(), 2000 + static_cast<uint64_t>(s));
  }
  GateNetwork gate = GateNetwork::init(cfg.d_model, cfg.d_model, 3000);
  randomize(gate.named_params(), 3001);
  return assemble_fused(std::move(specs), std::move(gate));
}

}  // namespace fuselm::bench
