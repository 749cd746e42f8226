#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "fuselm/data.hpp"
#include "fuselm/gate.hpp"
#include "fuselm/lm.hpp"

namespace fuselm {

// Gradient-tracking policy for a fused forward pass.
enum class FuseMode {
  kTracked,    // whole composite on the tape (joint fine-tuning)
  kGateOnly,   // specialists run grad-free; only gate ops are recorded
  kInference,  // nothing is recorded
};

// A committee of specialists plus the shared gate. Specialists must agree on
// LmConfig (and therefore vocabulary); templates are per-specialist.
struct FusedModel {
  std::vector<Specialist> specialists;
  GateNetwork gate;

  int num_specialists() const { return static_cast<int>(specialists.size()); }
  const LmConfig& config() const { return specialists.front().config(); }
  std::vector<PromptTemplate> templates() const;
  std::vector<Domain> domains() const;

  // ConfigError on empty committee, config disagreement, or a gate whose
  // input width differs from the model width.
  void validate() const;

  ParamRefs gate_params() const;        // "gate.*"
  ParamRefs specialist_params() const;  // "specialist.<domain>.*"
  ParamRefs named_params() const;       // both, gate first
};

FusedModel assemble_fused(std::vector<Specialist> specialists, GateNetwork gate);

// One teacher-forced pass over an example, aligned to the shared response
// frame. Row r of every tensor corresponds to predicting response token r
// (rows are gathered per stream, so differing prompt lengths cannot skew
// the alignment).
struct FusedForward {
  Tensor weights;                         // [R,S] mixing weights
  Tensor fused_logits;                    // [R,V]
  std::vector<Tensor> specialist_logits;  // S x [R,V]
  std::vector<int> targets;               // R response token ids
};

FusedForward fused_forward(const FusedModel& model, const WrappedExample& ex,
                           FuseMode mode,
                           std::optional<int> force_specialist = std::nullopt);

// Mean cross-entropy of the fused logits against the response tokens.
Tensor fused_response_loss(const FusedModel& model, const WrappedExample& ex,
                           FuseMode mode);

// Response-span perplexity of the fused model over a set of examples.
PerplexityResult fused_perplexity(const FusedModel& model,
                                  std::span<const TrainingExample> examples,
                                  const Tokenizer& tokenizer);

// Checkpoint I/O for the whole committee (gate + specialists in one file).
void save_fused(const std::filesystem::path& path, const FusedModel& model);
FusedModel load_fused(const std::filesystem::path& path, const Tokenizer& tokenizer);

}  // namespace fuselm
